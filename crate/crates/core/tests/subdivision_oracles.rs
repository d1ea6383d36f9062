use imagerep_core::analysis::predict_image;
use imagerep_core::estimator::PredictOptions;
use imagerep_core::image::BinaryImage;
use imagerep_core::subdivision::{fit_integral_range, subdivide_std, subdivision_estimate};
use imagerep_core::synthgen::{generate, BooleanSpec};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Blocking by explicit (row, column) loops, one ratio at a time.
fn naive_2d(img: &BinaryImage) -> Vec<(f64, f64)> {
    let d = img.domain().dims();
    let (h, w) = (d[0], d[1]);
    let mut out = Vec::new();
    let mut ratio = 2;
    while h.min(w) / ratio >= 4 {
        let (bh, bw) = (h / ratio, w / ratio);
        let mut fr = Vec::new();
        for by in 0..ratio {
            for bx in 0..ratio {
                let mut s = 0;
                for y in by * bh..(by + 1) * bh {
                    for x in bx * bw..(bx + 1) * bw {
                        s += img.bits()[y * w + x] as usize;
                    }
                }
                fr.push(s as f64 / (bh * bw) as f64);
            }
        }
        let m = fr.iter().sum::<f64>() / fr.len() as f64;
        let var = fr.iter().map(|f| (f - m).powi(2)).sum::<f64>() / fr.len() as f64;
        out.push(((bh * bw) as f64, var.sqrt()));
        ratio *= 2;
    }
    out
}

#[test]
fn matches_naive_blocking() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let h = rng.gen_range(16..70);
        let w = rng.gen_range(16..70);
        let bits = (0..h * w).map(|_| rng.gen_bool(0.4) as u8).collect();
        let img = BinaryImage::from_bits(&[h, w], bits).unwrap();
        let got = subdivide_std(&img).unwrap();
        let want = naive_2d(&img);
        assert_eq!(got.len(), want.len());
        for (g, (v, s)) in got.iter().zip(want) {
            assert_eq!(g.volume, v);
            assert!((g.std - s).abs() < 1e-12);
        }
    }
}

#[test]
fn three_dimensional_blocks() {
    let img = BinaryImage::from_bits(&[16, 16, 16], (0..4096).map(|i| ((i / 256) < 8) as u8).collect()).unwrap();
    let pts = subdivide_std(&img).unwrap();
    assert_eq!(pts[0].volume, 512.0);
    assert!((pts[0].std - 0.5).abs() < 1e-12);
}

#[test]
fn fit_ignores_point_order() {
    let img = generate(&BooleanSpec::circles(2, 128, 4.0, 0.4, 1)).unwrap();
    let mut pts = subdivide_std(&img).unwrap();
    let a = fit_integral_range(&pts, 0.4, img.domain()).unwrap();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let b = fit_integral_range(&pts, 0.4, img.domain()).unwrap();
    assert!((a.fitted_cls - b.fitted_cls).abs() < 1e-12);
}

#[test]
fn under_predicts_against_the_tpc_estimate() {
    let spec = BooleanSpec::circles(2, 200, 4.0, 0.5, 300);
    let (mut sub, mut tpc) = (0.0, 0.0);
    let n = 40;
    for i in 0..n {
        let img = generate(&spec.with_seed(300 + i)).unwrap();
        sub += subdivision_estimate(&img).unwrap().sigma_sub;
        tpc += predict_image(&img, &PredictOptions::default()).unwrap().sigma_tilde;
    }
    assert!(sub < tpc, "subdivision {} vs tpc {}", sub / n as f64, tpc / n as f64);
}
