use proptest::prelude::*;
use rowquant::quant::*;
use rowquant::Tensor;

fn fixed_bits() -> impl Strategy<Value = u32> {
    2u32..=8
}

fn pot_bits() -> impl Strategy<Value = u32> {
    2u32..=6
}

fn alpha() -> impl Strategy<Value = f64> {
    0.01f64..10.0
}

fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![-20.0f64..20.0, -1.0f64..1.0, Just(0.0)]
}

proptest! {
    #[test]
    fn fixed_is_idempotent(m in fixed_bits(), a in alpha(), w in weight()) {
        let q = quantize_fixed(w, m, a);
        prop_assert_eq!(quantize_fixed(q, m, a).to_bits(), q.to_bits());
    }

    #[test]
    fn pot_is_idempotent(m in pot_bits(), a in alpha(), w in weight()) {
        let q = quantize_pot(w, m, a);
        prop_assert_eq!(quantize_pot(q, m, a).to_bits(), q.to_bits());
    }

    #[test]
    fn outputs_are_levels(m in pot_bits(), a in alpha(), w in weight()) {
        let fl = fixed_levels(m, a).unwrap();
        prop_assert!(fl.contains(&quantize_fixed(w, m, a)));
        let pl = pot_levels(m, a).unwrap();
        prop_assert!(pl.contains(&quantize_pot(w, m, a)));
    }

    #[test]
    fn fixed_picks_a_nearest_level(m in fixed_bits(), a in alpha(), w in weight()) {
        let c = w.clamp(-a, a);
        let d = (quantize_fixed(w, m, a) - c).abs();
        for l in fixed_levels(m, a).unwrap() {
            // Level values and the rounding of c·n/α can differ by an ulp.
            prop_assert!(d <= (l - c).abs() + 1e-12 * a, "w={w} level {l}");
        }
    }

    #[test]
    fn pot_picks_nearest_exponent(m in pot_bits(), a in alpha(), w in weight()) {
        let emin = pot_min_exp(m);
        let c = w.clamp(-a, a);
        let r = (c.abs() / a).log2();
        let q = quantize_pot(w, m, a);
        if c.abs() / a >= 2f64.powi(emin) {
            let chosen = (q.abs() / a).log2();
            for e in emin..=0 {
                prop_assert!((r - chosen).abs() <= (r - e as f64).abs() + 1e-12);
            }
        }
        prop_assert!(q == 0.0 || q.signum() == c.signum());
    }

    #[test]
    fn quantizers_are_monotone(m in pot_bits(), a in alpha(), w1 in weight(), w2 in weight()) {
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        prop_assert!(quantize_fixed(lo, m, a) <= quantize_fixed(hi, m, a));
        prop_assert!(quantize_pot(lo, m, a) <= quantize_pot(hi, m, a));
    }

    #[test]
    fn quantizers_are_scale_equivariant(m in pot_bits(), a in 0.01f64..10.0, c in 0.01f64..10.0, w in weight()) {
        let f = quantize_fixed(c * w, m, c * a) - c * quantize_fixed(w, m, a);
        let p = quantize_pot(c * w, m, c * a) - c * quantize_pot(w, m, a);
        prop_assert!(f.abs() <= 1e-12, "fixed {f}");
        prop_assert!(p.abs() <= 1e-12, "pot {p}");
    }

    #[test]
    fn codes_dequantize_to_quantized_values(a in alpha(), w in weight()) {
        for spec in QuantSpec::ALL {
            let code = spec.code(w, a);
            prop_assert_eq!(spec.dequantize(code, a), spec.quantize(w, a));
            let n = (1i32 << (spec.weight_bits() - 1)) - 1;
            prop_assert!(code.abs() <= n);
        }
    }

    #[test]
    fn activations_stay_on_grid(x in -5.0f64..20.0, clip in 0.01f64..10.0) {
        let code = activation_code(x, ACT_BITS, clip);
        prop_assert!(code <= 15);
        let v = quantize_activation_value(x, ACT_BITS, clip);
        prop_assert!((0.0..=clip).contains(&v));
        prop_assert_eq!(v, activation_value(code, ACT_BITS, clip));
        let inside = x.clamp(0.0, clip);
        prop_assert!((v - inside).abs() <= clip / 30.0 + 1e-12);
    }

    #[test]
    fn calibrated_alpha_beats_max(row in prop::collection::vec(-2.0f64..2.0, 1..40)) {
        for spec in QuantSpec::ALL {
            let a = calibrate_alpha(&row, spec);
            prop_assert!(a > 0.0);
            let max = row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
            if max > 0.0 {
                let mse = |alpha: f64| row.iter().map(|&w| (spec.quantize(w, alpha) - w).powi(2)).sum::<f64>();
                prop_assert!(mse(a) <= mse(max));
            }
        }
    }
}

#[test]
fn rigid_resolution_gaps() {
    let gap = |levels: Vec<f64>| {
        let pos: Vec<f64> = levels.into_iter().filter(|&l| l >= 0.0).collect();
        pos.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max)
    };
    assert_eq!(gap(pot_levels(4, 1.0).unwrap()), 0.5);
    let fixed = gap(fixed_levels(4, 1.0).unwrap());
    // Adjacent Fixed levels k/7 and (k+1)/7 differ by 1/7 up to rounding.
    assert!((fixed - 1.0 / 7.0).abs() < 1e-15, "{fixed}");
}

#[test]
fn level_counts() {
    for m in 2..=8 {
        assert_eq!(fixed_levels(m, 1.0).unwrap().len(), (1 << m) - 1);
        assert_eq!(pot_levels(m, 1.0).unwrap().len(), (1 << m) - 1);
    }
    assert!(fixed_levels(1, 1.0).is_err());
    assert!(pot_levels(9, 1.0).is_err());
    assert!(fixed_levels(4, 0.0).is_err());
}

#[test]
fn exact_level_row_is_reproduced() {
    let row = fixed_levels(4, 0.8).unwrap();
    let a = calibrate_alpha(&row, QuantSpec::FixedW4A4);
    for &w in &row {
        assert_eq!(QuantSpec::FixedW4A4.quantize(w, a), w);
    }
    let a = calibrate_alpha(&[0.3], QuantSpec::FixedW4A4);
    assert_eq!(QuantSpec::FixedW4A4.quantize(0.3, a), 0.3);
}

#[test]
fn tensor_activation_quantization() {
    let x = Tensor::vector(vec![-1.0, 0.0, 0.5, 1.0, 7.0]);
    let q = quantize_activation(&x, 4, 6.0);
    assert_eq!(q.data(), &[0.0, 0.0, 0.4, 1.2, 6.0]);
}
