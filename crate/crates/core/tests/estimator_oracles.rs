use imagerep_core::estimator::{normalization_constants, predict, psi_periodic, PredictOptions};
use imagerep_core::image::{BinaryImage, ImageDomain};
use imagerep_core::synthgen::{generate, BooleanSpec};
use imagerep_core::tpc::{periodic_tpc, select_r0, R0Policy, R0Selection};
use imagerep_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(dims: &[usize], density: f64, seed: u64) -> BinaryImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    BinaryImage::from_bits(dims, (0..n).map(|_| rng.gen_bool(density) as u8).collect()).unwrap()
}

fn brute_tpc(img: &BinaryImage, r: (isize, isize)) -> f64 {
    let d = img.domain().dims();
    let (h, w) = (d[0] as isize, d[1] as isize);
    let b = img.bits();
    let mut s = 0u64;
    for y in 0..h {
        for x in 0..w {
            let yy = (y + r.0).rem_euclid(h);
            let xx = (x + r.1).rem_euclid(w);
            s += (b[(y * w + x) as usize] * b[(yy * w + xx) as usize]) as u64;
        }
    }
    s as f64 / (h * w) as f64
}

/// Displacements of the centered grid, each periodic class once.
fn centered(l: usize) -> impl Iterator<Item = isize> {
    let c = ((l - 1) / 2) as isize;
    (0..l as isize).map(move |i| i - c)
}

#[test]
fn constants_match_lattice_enumeration() {
    let domain = ImageDomain::new(&[6, 6]).unwrap();
    for r0 in [0.0, 1.0, 2.0, 2.5] {
        let c = normalization_constants(&domain, r0);
        let vol = 36.0;
        let (mut outer, mut missing, mut ball) = (0.0, 0.0, 0usize);
        for dy in -5isize..=5 {
            for dx in -5isize..=5 {
                let ov = ((6 - dy.abs()) * (6 - dx.abs())) as f64;
                if ((dy * dy + dx * dx) as f64).sqrt() > r0 {
                    outer += ov / vol;
                } else {
                    missing += (vol - ov) / vol;
                    ball += 1;
                }
            }
        }
        assert!((c.c_r0 - outer).abs() < 1e-12, "r0={r0}");
        assert!((c.c_p_r0_literal - (outer + missing)).abs() < 1e-12);
        assert_eq!(c.ball_count, ball);
        assert!((c.c_p_r0 - (vol - ball as f64)).abs() < 1e-12);
        assert!(c.c_r0 > 0.0 && c.c_r0 < vol);
        assert!(c.c_p_r0 <= c.c_r0);
    }
    let c = normalization_constants(&domain, 0.0);
    assert!((c.c_p_r0_literal - c.c_r0).abs() < 1e-12);
}

#[test]
fn psi_matches_literal_formula() {
    for seed in 0..20 {
        let img = random_image(&[16, 16], 0.35, 500 + seed);
        let tpc = periodic_tpc(&img).unwrap();
        let sel = select_r0(&tpc, &R0Policy::default()).unwrap();
        let consts = normalization_constants(img.domain(), sel.r0);
        let phi = img.count_ones() as f64 / 256.0;
        let (mut sum, mut ring, mut ring_n, mut ball) = (0.0, 0.0, 0usize, 0usize);
        let mut ball_values = Vec::new();
        for dy in centered(16) {
            for dx in centered(16) {
                let rad = ((dy * dy + dx * dx) as f64).sqrt();
                if rad <= sel.r0 {
                    let t = brute_tpc(&img, (dy, dx));
                    sum += t - phi * phi;
                    ball += 1;
                    ball_values.push(t);
                    if rad >= sel.r0 - 10.0 {
                        ring += t;
                        ring_n += 1;
                    }
                }
            }
        }
        let plain = sum / (256.0 - ball as f64);
        let got = psi_periodic(&tpc, &sel, &consts, false);
        assert!((got.raw - plain).abs() < 1e-10, "seed {seed}: {} vs {plain}", got.raw);

        let reference = (phi * phi + ring / ring_n as f64) / 2.0;
        let stab: f64 = ball_values.iter().map(|t| t - reference).sum::<f64>() / (256.0 - ball as f64 / 2.0);
        let got = psi_periodic(&tpc, &sel, &consts, true);
        assert!((got.raw - stab).abs() < 1e-10);
    }
}

#[test]
fn all_ones_psi_is_zero() {
    let img = BinaryImage::from_bits(&[16, 16], vec![1; 256]).unwrap();
    let tpc = periodic_tpc(&img).unwrap();
    let sel = R0Selection {
        r0: 4.0,
        increment: 4,
        ring_failure_fraction: 0.0,
        capped: false,
        ring_mean: 1.0,
    };
    let consts = normalization_constants(img.domain(), 4.0);
    for stabilize in [false, true] {
        assert!(psi_periodic(&tpc, &sel, &consts, stabilize).value.abs() < 1e-12);
    }
}

#[test]
fn degenerate_images_are_rejected() {
    for bit in [0u8, 1] {
        let img = BinaryImage::from_bits(&[16, 16], vec![bit; 256]).unwrap();
        let e = predict(&periodic_tpc(&img).unwrap(), &PredictOptions::default()).unwrap_err();
        assert!(matches!(e, Error::DegeneratePhaseFraction(_)));
    }
}

#[test]
fn cls_scales_with_pixel_replication() {
    // Single estimates near a cancelling sum are noisy, so compare ensemble means.
    let (mut small, mut large) = (0.0, 0.0);
    for seed in 0..12 {
        let img = generate(&BooleanSpec::circles(2, 150, 3.0, 0.5, 40 + seed)).unwrap();
        let a = predict(&periodic_tpc(&img).unwrap(), &PredictOptions::default()).unwrap();
        let b = predict(&periodic_tpc(&img.upscale(2)).unwrap(), &PredictOptions::default()).unwrap();
        assert!(!a.r0_selection.capped && !b.r0_selection.capped);
        assert_eq!(b.r0_selection.r0, 2.0 * a.r0_selection.r0);
        small += a.cls;
        large += b.cls;
    }
    let ratio = large / small;
    assert!((ratio - 2.0).abs() <= 0.3, "ratio {ratio}");
}

#[test]
fn cls_and_sigma_are_consistent() {
    let img = generate(&BooleanSpec::circles(2, 120, 4.0, 0.4, 3)).unwrap();
    let e = predict(&periodic_tpc(&img).unwrap(), &PredictOptions::default()).unwrap();
    assert!((e.sigma_tilde - e.psi.sqrt()).abs() < 1e-15);
    let phi = e.phi;
    let want = (e.volume as f64 * e.psi / (phi * (1.0 - phi))).sqrt();
    assert!((e.cls - want).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn complement_gives_same_psi(h in 10usize..40, w in 10usize..40, d in 0.1f64..0.9, seed in any::<u64>()) {
        let img = random_image(&[h, w], d, seed);
        let inv = img.complement();
        let a = predict(&periodic_tpc(&img).unwrap(), &PredictOptions::default());
        let b = predict(&periodic_tpc(&inv).unwrap(), &PredictOptions::default());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.psi_raw - b.psi_raw).abs() < 1e-10);
                prop_assert_eq!(a.r0_selection.r0, b.r0_selection.r0);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one phase analysable, the other not"),
        }
    }

    #[test]
    fn predict_never_returns_nan(h in 8usize..48, w in 8usize..48, d in 0.0f64..1.0, seed in any::<u64>()) {
        let img = random_image(&[h, w], d, seed);
        match predict(&periodic_tpc(&img).unwrap(), &PredictOptions::default()) {
            Ok(e) => {
                prop_assert!(e.psi.is_finite() && e.psi >= 0.0);
                prop_assert!(e.sigma_tilde.is_finite() && e.cls.is_finite());
                prop_assert_eq!(e.floored, e.psi_raw < 0.0);
            }
            Err(e) => prop_assert!(matches!(e, Error::DegeneratePhaseFraction(_))),
        }
    }
}
