fn main() {
    std::process::exit(harvim::cli::run(std::env::args_os()));
}
