use super::*;
use crate::autodiff::gradcheck::relative_error;
use crate::autodiff::{grad, Tape};
use approx::assert_relative_eq;
use proptest::prelude::*;

const SIDE: usize = 32;

fn generator() -> WatermarkGenerator<f64> {
    WatermarkGenerator::new(SIDE).unwrap()
}

fn params(raw_left: f64, raw_bottom: f64, log_scale: f64) -> WatermarkParams {
    WatermarkParams {
        glyph: GlyphSource::Atlas('8'),
        raw_left,
        raw_bottom,
        log_scale,
    }
}

/// (first row, last row, first col, last col) of pixels above `eps`.
fn ink_box(m: &Tensor<f64>, eps: f64) -> (usize, usize, usize, usize) {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (k, v) in m.data().iter().enumerate() {
        if *v > eps {
            let (r, c) = (k / SIDE, k % SIDE);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    (r0, r1, c0, c1)
}

fn centroid_x(m: &Tensor<f64>) -> f64 {
    let mass: f64 = m.sum();
    m.data()
        .iter()
        .enumerate()
        .map(|(k, v)| (k % SIDE) as f64 * v)
        .sum::<f64>()
        / mass
}

#[test]
fn mask_constants() {
    let m = Tensor::<f64>::from_vec(vec![0.0, ALPHA, 0.5, 1.0]).unwrap();
    let w = soft_mask(&m, ALPHA, BETA).unwrap().coverage;
    assert!(w.data()[0] < 1e-6);
    assert_relative_eq!(w.data()[0], 3.059_022_269_256_247e-7, max_relative = 1e-9);
    assert_eq!(w.data()[1], 0.5);
    assert!(w.data()[2] > 1.0 - 1e-6);
    assert!(w.data()[3] > 1.0 - 1e-6);
    let w32 = soft_mask(&m.cast::<f32>(), ALPHA, BETA).unwrap().coverage;
    assert!(w32.data()[0] < 1e-6);
    assert_eq!(w32.data()[3], 1.0);
    assert!(soft_mask(&m, ALPHA, 0.0).is_err());
}

#[test]
fn zero_ratios_touch_left_and_bottom_edges() {
    let m = generator().render(&params(-40.0, -40.0, 0.0)).unwrap();
    let (_, r1, c0, _) = ink_box(&m, 0.5);
    assert_eq!(c0, 0);
    assert_eq!(r1, SIDE - 1);
}

#[test]
fn unit_ratios_touch_right_and_top_edges() {
    for log_scale in [-0.8, 0.0, 0.2] {
        let m = generator().render(&params(40.0, 40.0, log_scale)).unwrap();
        let (r0, _, _, c1) = ink_box(&m, 0.5);
        assert_eq!(c1, SIDE - 1, "scale {log_scale}");
        assert_eq!(r0, 0, "scale {log_scale}");
    }
}

#[test]
fn integer_offset_copies_the_bitmap() {
    // unit scale leaves 16 free pixels; ratios 1/4 and 1/2 give offsets 4 and 8
    let p = params((0.25f64 / 0.75).ln(), 0.0, 0.0);
    let m = generator().render(&p).unwrap();
    let glyph = GlyphAtlas::bundled().get('8').unwrap();
    for r in 0..16 {
        for c in 0..16 {
            let got = m.data()[(r + 8) * SIDE + c + 4];
            assert!((got - glyph.data()[r * 16 + c] as f64).abs() < 1e-9);
        }
    }
    assert!((m.sum() - glyph.sum() as f64).abs() < 1e-9);
}

#[test]
fn log_scale_is_clamped_to_area_bounds() {
    let r = *generator().renderer();
    let (lo, hi) = r.log_scale_bounds();
    let area = |ls: f64| r.footprint(ls).powi(2) / (SIDE * SIDE) as f64;
    assert_relative_eq!(area(lo), MIN_AREA_FRACTION, max_relative = 1e-12);
    assert_relative_eq!(area(hi), MAX_AREA_FRACTION, max_relative = 1e-12);
    assert_relative_eq!(area(100.0), MAX_AREA_FRACTION, max_relative = 1e-12);
    let a = generator().render(&params(0.0, 0.0, 50.0)).unwrap();
    let b = generator().render(&params(0.0, 0.0, hi)).unwrap();
    assert_eq!(a, b);
    assert!(Renderer::new(4, 16).is_err());
}

#[test]
fn doubling_area_roughly_doubles_regularizer() {
    let g = generator();
    let base = -0.3f64;
    let r1 = size_regularizer(&g.render(&params(0.0, 0.0, base)).unwrap());
    let r2 = size_regularizer(&g.render(&params(0.0, 0.0, base + 0.5 * 2f64.ln())).unwrap());
    assert!((r2 / r1 - 2.0).abs() < 0.1, "{}", r2 / r1);
}

#[test]
fn render_gradients_match_finite_differences() {
    let g = generator();
    let mut rng = SeededRng::new(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let raw = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0), rng.uniform_range(-0.9, 0.2)];
        let weights: Tensor<f64> = rng.uniform_tensor([SIDE * SIDE], 0.0, 1.0);
        let f = |x: &[f64; 3]| -> f64 {
            let m = g.render(&params(x[0], x[1], x[2])).unwrap();
            m.mul(&weights).unwrap().sum()
        };
        let tape = Tape::new();
        let p = params(raw[0], raw[1], raw[2]);
        let vars = ParamVars::leaves(&p, &tape);
        let out = g.render_var(&p, &vars).unwrap().mul(&Var::constant(weights.clone())).unwrap().sum().unwrap();
        let analytic: Vec<f64> = grad(&out, &vars.all(), false)
            .unwrap()
            .iter()
            .map(|v| v.item().unwrap())
            .collect();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let (mut a, mut b) = (raw, raw);
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn observation_limits() {
    let mut rng = SeededRng::new(0);
    let x: Tensor<f64> = rng.uniform_tensor([SIDE * SIDE], 0.0, 1.0);
    let zeros = soft_mask(&Tensor::zeros([SIDE * SIDE]), ALPHA, BETA).unwrap();
    let y = compose_observation(&x, &zeros, 0.0, &mut rng).unwrap();
    assert!(y.max_abs_diff(&x).unwrap() <= 3.06e-7);
    let ones = soft_mask(&Tensor::ones([SIDE * SIDE]), ALPHA, BETA).unwrap();
    let y = compose_observation(&x, &ones, 0.0, &mut rng).unwrap();
    assert!(y.max_abs() < 1e-30);
    let y = compose_observation(&x, &zeros, 0.05, &mut rng).unwrap();
    let r = y.sub(&x).unwrap();
    let mean = r.mean();
    let std = (r.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
    assert!((std - 0.05).abs() < 0.005, "{std}");
    assert!(compose_observation(&x, &soft_mask(&Tensor::zeros([3]), ALPHA, BETA).unwrap(), 0.0, &mut rng).is_err());
}

#[test]
fn observation_is_seed_deterministic() {
    let x: Tensor<f32> = SeededRng::new(1).uniform_tensor([64], 0.0, 1.0);
    let m = soft_mask(&SeededRng::new(2).uniform_tensor([64], 0.0, 1.0), ALPHA, BETA).unwrap();
    let a = compose_observation(&x, &m, 0.05, &mut SeededRng::new(3)).unwrap();
    let b = compose_observation(&x, &m, 0.05, &mut SeededRng::new(3)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn display_overlays_tone() {
    let x = Tensor::<f64>::full([SIDE * SIDE], 0.05);
    let none = soft_mask(&Tensor::zeros([SIDE * SIDE]), ALPHA, BETA).unwrap();
    assert!(compose_display(&x, &none, 1.0).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
    let m = generator().render(&params(0.0, 0.0, 0.0)).unwrap();
    let mask = soft_mask(&m, ALPHA, BETA).unwrap();
    let shown = compose_display(&x, &mask, 1.0).unwrap();
    let (mut sum, mut count) = (0.0, 0);
    for (s, w) in shown.data().iter().zip(mask.coverage.data()) {
        if *w > 0.5 {
            sum += s;
            count += 1;
        }
    }
    assert!(sum / count as f64 >= 0.9);
}

#[test]
fn edge_ratios_saturate() {
    assert_eq!(ratio_to_raw(0.0), -EDGE_RAW);
    assert_eq!(ratio_to_raw(1.0), EDGE_RAW);
    assert_eq!(ratio_to_raw(0.5), 0.0);
    let p = WatermarkParams::new(GlyphSource::Atlas('A'), 0.3, 0.7, 0.0);
    assert_relative_eq!(p.p_left(), 0.3, max_relative = 1e-12);
    assert_relative_eq!(p.p_bottom(), 0.7, max_relative = 1e-12);
}

#[test]
fn latent_glyphs_are_differentiable_in_the_code() {
    let atlas = GlyphAtlas::bundled();
    let mut rng = SeededRng::new(4);
    let dec: DecoderGenerator<f64> = DecoderGenerator::init(&DecoderConfig::default(), atlas, &mut rng);
    let z = dec.code(3).unwrap();
    let g = generator().with_decoder(dec).unwrap();
    let p = WatermarkParams {
        glyph: GlyphSource::Latent(z.clone()),
        raw_left: 0.3,
        raw_bottom: -0.2,
        log_scale: -0.1,
    };
    let tape = Tape::new();
    let vars = ParamVars::leaves(&p, &tape);
    let out = g.render_var(&p, &vars).unwrap().sum().unwrap();
    let dz = grad(&out, &[vars.latent.as_ref().unwrap()], false).unwrap().remove(0);
    let h = 1e-6;
    for i in 0..z.len() {
        let mut a = p.clone();
        let mut b = p.clone();
        if let (GlyphSource::Latent(za), GlyphSource::Latent(zb)) = (&mut a.glyph, &mut b.glyph) {
            za[i] += h;
            zb[i] -= h;
        }
        let fd = (g.render(&a).unwrap().sum() - g.render(&b).unwrap().sum()) / (2.0 * h);
        assert!((fd - dz.value().data()[i]).abs() <= 1e-5 * fd.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn centroid_moves_right_with_raw_left(a in -2.5f64..2.5, delta in 0.05f64..1.0, ls in -0.9f64..0.2) {
        let g = generator();
        let c1 = centroid_x(&g.render(&params(a, 0.0, ls)).unwrap());
        let c2 = centroid_x(&g.render(&params(a + delta, 0.0, ls)).unwrap());
        prop_assert!(c2 > c1);
    }

    #[test]
    fn glyph_stays_inside_frame(l in -50f64..50.0, b in -50f64..50.0) {
        // at unit scale bilinear sampling conserves mass unless ink is clipped
        let g = generator();
        let m = g.render(&params(l, b, 0.0)).unwrap();
        let ink = GlyphAtlas::bundled().get('8').unwrap().sum() as f64;
        prop_assert!((m.sum() - ink).abs() < 1e-6);
        prop_assert!(m.data().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn coverage_is_monotone_in_m(a in 0f64..1.0, d in 0f64..0.5) {
        let w = soft_mask(&Tensor::from_vec(vec![a, a + d]).unwrap(), ALPHA, BETA).unwrap().coverage;
        prop_assert!(w.data()[1] >= w.data()[0]);
        prop_assert!(w.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
    }
}
