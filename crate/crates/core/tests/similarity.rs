use carm_core::geometry::{Chart, EulerPose, Intrinsics};
use carm_core::render::{make_rays, render_trilinear, Image};
use carm_core::similarity::*;
use carm_core::volume::phantom::{make_phantom, PhantomSpec};
use carm_core::Volume;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL: [Metric; 4] = [
    Metric::Ncc,
    Metric::Mncc,
    Metric::Gncc,
    Metric::MnccGnccMean,
];

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn smooth(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let mut p = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            p.push(
                c.iter()
                    .map(|&(x, y, a)| {
                        a * (-((u as f64 - x).powi(2) + (v as f64 - y).powi(2)) / 40.0).exp()
                    })
                    .sum(),
            );
        }
    }
    Image::new(h, w, p).unwrap()
}

fn affine(a: &Image, s: f64, c: f64) -> Image {
    a.map(|x| s * x + c)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa * sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn px(img: &Image, u: isize, v: isize) -> f64 {
    let u = u.clamp(0, img.width as isize - 1) as usize;
    let v = v.clamp(0, img.height as isize - 1) as usize;
    img.get(u, v)
}

fn pool_ref(img: &Image) -> Image {
    let (h, w) = (img.height.div_ceil(2), img.width.div_ceil(2));
    let mut p = Vec::new();
    for v in 0..h as isize {
        for u in 0..w as isize {
            p.push(
                (px(img, 2 * u, 2 * v)
                    + px(img, 2 * u + 1, 2 * v)
                    + px(img, 2 * u, 2 * v + 1)
                    + px(img, 2 * u + 1, 2 * v + 1))
                    / 4.0,
            );
        }
    }
    Image::new(h, w, p).unwrap()
}

fn sobel_ref(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (mut gx, mut gy) = (Vec::new(), Vec::new());
    for v in 0..img.height as isize {
        for u in 0..img.width as isize {
            let p = |du: isize, dv: isize| px(img, u + du, v + dv);
            gx.push((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1)));
            gy.push((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1)));
        }
    }
    (gx, gy)
}

fn mncc_ref(a: &Image, b: &Image, levels: usize) -> f64 {
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut sum = pearson(&a.pixels, &b.pixels);
    for _ in 1..levels {
        a = pool_ref(&a);
        b = pool_ref(&b);
        sum += pearson(&a.pixels, &b.pixels);
    }
    sum / levels as f64
}

fn gncc_ref(a: &Image, b: &Image) -> f64 {
    let (ax, ay) = sobel_ref(a);
    let (bx, by) = sobel_ref(b);
    0.5 * (pearson(&ax, &bx) + pearson(&ay, &by))
}

#[test]
fn ncc_identities() {
    let a = noise(9, 7, 1);
    assert!((ncc(&a, &a).unwrap().value - 1.0).abs() < 1e-9);
    assert!((ncc(&a, &a.map(|x| -x)).unwrap().value + 1.0).abs() < 1e-9);
    assert!((ncc(&a, &a.map(|x| x + 3.5)).unwrap().value - 1.0).abs() < 1e-9);
    let b = noise(9, 7, 2);
    assert!((ncc(&a, &b).unwrap().value - pearson(&a.pixels, &b.pixels)).abs() < 1e-12);
}

#[test]
fn constant_pair_is_degenerate_zero() {
    let a = Image::new(4, 4, vec![2.0; 16]).unwrap();
    let b = Image::new(4, 4, vec![-1.0; 16]).unwrap();
    let v = ncc(&a, &b).unwrap();
    assert_eq!(v.value, 0.0);
    assert!(v.degenerate);
    assert!(!ncc(&a, &noise(4, 4, 3)).unwrap().degenerate);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let (a, b) = (noise(4, 4, 1), noise(4, 5, 2));
    assert!(ncc(&a, &b).is_err());
    for m in ALL {
        assert!(combined(&a, &b, &SimilarityConfig::with_metric(m)).is_err());
    }
}

#[test]
fn mncc_levels() {
    let (a, b) = (noise(16, 12, 4), noise(16, 12, 5));
    for l in 1..=3 {
        assert!((mncc(&a, &a, l).unwrap() - 1.0).abs() < 1e-12);
    }
    assert_eq!(mncc(&a, &b, 1).unwrap(), ncc(&a, &b).unwrap().value);
    assert!(mncc(&a, &b, 4).is_err());
    assert!(mncc(&a, &b, 0).is_err());
}

#[test]
fn mncc_two_levels_by_hand() {
    let a = Image::new(
        4,
        4,
        (0..16)
            .map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64)
            .collect(),
    )
    .unwrap();
    let b = Image::new(
        4,
        4,
        (0..16)
            .map(|i| ((i * 3) % 4) as f64 - 0.2 * i as f64)
            .collect(),
    )
    .unwrap();
    let pa: Vec<f64> = [(0, 0), (2, 0), (0, 2), (2, 2)]
        .iter()
        .map(|&(u, v)| {
            (a.get(u, v) + a.get(u + 1, v) + a.get(u, v + 1) + a.get(u + 1, v + 1)) / 4.0
        })
        .collect();
    let pb: Vec<f64> = [(0, 0), (2, 0), (0, 2), (2, 2)]
        .iter()
        .map(|&(u, v)| {
            (b.get(u, v) + b.get(u + 1, v) + b.get(u, v + 1) + b.get(u + 1, v + 1)) / 4.0
        })
        .collect();
    let expected = 0.5 * (pearson(&a.pixels, &b.pixels) + pearson(&pa, &pb));
    assert!((mncc(&a, &b, 2).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn odd_sizes_pool_by_replication() {
    let (a, b) = (noise(13, 11, 6), noise(13, 11, 7));
    assert!((mncc(&a, &b, 3).unwrap() - mncc_ref(&a, &b, 3)).abs() < 1e-12);
}

#[test]
fn gncc_properties() {
    let a = smooth(20, 24, 8);
    assert!((gncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let b = noise(20, 24, 9);
    assert!((gncc(&a, &b).unwrap() - gncc(&a.map(|x| x + 10.0), &b).unwrap()).abs() < 1e-12);
    assert!((gncc(&a, &b).unwrap() - gncc_ref(&a, &b)).abs() < 1e-12);
    assert!(gncc(&noise(2, 5, 1), &noise(2, 5, 2)).is_err());
}

#[test]
fn shifted_edge_lowers_gncc() {
    let edge = |at: usize| {
        Image::new(
            10,
            10,
            (0..100)
                .map(|i| if i % 10 >= at { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap()
    };
    let (a, b) = (edge(4), edge(5));
    let g = gncc(&a, &b).unwrap();
    assert!(g < 1.0, "{g}");
    assert!((g - gncc_ref(&a, &b)).abs() < 1e-12);
}

#[test]
fn combined_dispatch() {
    let (a, b) = (smooth(16, 16, 10), noise(16, 16, 11));
    for m in ALL {
        assert!((combined(&a, &a, &SimilarityConfig::with_metric(m)).unwrap() - 1.0).abs() < 1e-12);
    }
    assert_eq!(
        combined(&a, &b, &SimilarityConfig::with_metric(Metric::Ncc)).unwrap(),
        ncc(&a, &b).unwrap().value
    );
    let bad = SimilarityConfig {
        pyramid_levels: 0,
        ..Default::default()
    };
    assert!(combined(&a, &b, &bad).is_err());
}

/// Adds white noise and a checkerboard to `a`. Pooling averages most of the
/// noise away while the Sobel smoothing tap cancels the checkerboard away
/// from the border, so `p` mostly moves the gradient metric and `q` the
/// pyramid metric.
fn blended(a: &Image, p: f64, q: f64) -> Image {
    let s = noise(a.height, a.width, 99);
    let mut out = a.clone();
    for v in 0..a.height {
        for u in 0..a.width {
            let check = if (u + v) % 2 == 0 { 1.0 } else { -1.0 };
            out.pixels[v * a.width + u] += p * s.get(u, v) + q * check;
        }
    }
    out
}

fn bisect(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f decreasing on [lo, hi]
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn combined_of_point_eight_and_point_six_is_point_seven() {
    let a = smooth(32, 32, 12);
    let (mut p, mut q) = (0.0, 0.0);
    for _ in 0..30 {
        p = bisect(0.0, 10.0, 0.6, |p| gncc_ref(&a, &blended(&a, p, q)));
        q = bisect(0.0, 10.0, 0.8, |q| mncc_ref(&a, &blended(&a, p, q), 4));
    }
    let b = blended(&a, p, q);
    assert!((mncc_ref(&a, &b, 4) - 0.8).abs() < 1e-9);
    assert!((gncc_ref(&a, &b) - 0.6).abs() < 1e-9);
    let v = combined(&a, &b, &SimilarityConfig::default()).unwrap();
    assert!((v - 0.7).abs() < 1e-9, "{v}");
}

#[test]
fn backward_matches_finite_differences() {
    let (a, b) = (smooth(12, 10, 13), smooth(12, 10, 14));
    let a = Image::new(
        12,
        10,
        a.pixels
            .iter()
            .zip(&noise(12, 10, 15).pixels)
            .map(|(x, n)| x + 0.1 * n)
            .collect(),
    )
    .unwrap();
    for m in ALL {
        let cfg = SimilarityConfig {
            metric: m,
            pyramid_levels: 3,
            ..Default::default()
        };
        let (v, g) = combined_backward(&a, &b, &cfg).unwrap();
        assert_eq!(v, combined(&a, &b, &cfg).unwrap());
        for i in [0, 17, 55, 119] {
            let h = 1e-6;
            let mut ap = a.clone();
            ap.pixels[i] += h;
            let mut am = a.clone();
            am.pixels[i] -= h;
            let fd =
                (combined(&ap, &b, &cfg).unwrap() - combined(&am, &b, &cfg).unwrap()) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 1e-7,
                "{m:?} pixel {i}: {} vs {fd}",
                g[i]
            );
        }
    }
}

fn blob_volume() -> Volume {
    make_phantom(&PhantomSpec::default_smooth_blob())
        .unwrap()
        .volume
}

fn scalar_fd(
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    e: &EulerPose,
    m: usize,
    cfg: &SimilarityConfig,
    chart: Chart,
) -> [f64; 6] {
    let steps = [1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2];
    let pose = e.to_pose().unwrap();
    let eval = |d: [f64; 6]| {
        let p = chart.perturb(&pose, &d).unwrap();
        combined(
            &render_trilinear(v, &make_rays(k, &p), m).unwrap(),
            target,
            cfg,
        )
        .unwrap()
    };
    let mut g = [0.0; 6];
    for j in 0..6 {
        let mut d = [0.0; 6];
        d[j] = steps[j];
        let plus = eval(d);
        d[j] = -steps[j];
        g[j] = (plus - eval(d)) / (2.0 * steps[j]);
    }
    g
}

fn rel(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn chained_pose_gradient_matches_scalar_finite_differences() {
    let v = blob_volume();
    let k = Intrinsics::new(1000.0, 32, 32, [8.0, 8.0], [0.0, 0.0]).unwrap();
    let truth = EulerPose::new(3.0, -2.0, 1.0, 2.0, -650.0, -1.0);
    let target = render_trilinear(&v, &make_rays(&k, &truth.to_pose().unwrap()), 200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..3 {
        let off: [f64; 6] = std::array::from_fn(|j| {
            if j < 3 {
                rng.gen_range(-4.0..4.0)
            } else {
                rng.gen_range(-6.0..6.0)
            }
        });
        let e = EulerPose::from_array(std::array::from_fn(|j| truth.to_array()[j] + off[j]));
        for metric in ALL {
            let cfg = SimilarityConfig {
                metric,
                pyramid_levels: 3,
                ..Default::default()
            };
            for chart in [Chart::Se3, Chart::EulerZxy] {
                let (_, g) = similarity_gradient_wrt_pose(
                    &target,
                    &v,
                    &k,
                    &e.to_pose().unwrap(),
                    200,
                    &cfg,
                    chart,
                )
                .unwrap();
                let fd = scalar_fd(&target, &v, &k, &e, 200, &cfg, chart);
                assert!(rel(&g, &fd) < 1e-2, "{metric:?} {chart:?}: {g:?} vs {fd:?}");
            }
        }
    }
}

#[test]
fn gradient_vanishes_at_the_optimum() {
    let v = blob_volume();
    let k = Intrinsics::new(1000.0, 32, 32, [8.0, 8.0], [0.0, 0.0]).unwrap();
    let pose = EulerPose::new(3.0, -2.0, 1.0, 2.0, -650.0, -1.0)
        .to_pose()
        .unwrap();
    let target = render_trilinear(&v, &make_rays(&k, &pose), 200).unwrap();
    let off = EulerPose::new(4.0, -2.0, 1.0, 2.0, -650.0, -1.0)
        .to_pose()
        .unwrap();
    for metric in ALL {
        let cfg = SimilarityConfig {
            metric,
            pyramid_levels: 3,
            ..Default::default()
        };
        let (value, g) =
            similarity_gradient_wrt_pose(&target, &v, &k, &pose, 200, &cfg, Chart::Se3).unwrap();
        let (_, g_off) =
            similarity_gradient_wrt_pose(&target, &v, &k, &off, 200, &cfg, Chart::Se3).unwrap();
        let norm = |g: [f64; 6]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((value - 1.0).abs() < 1e-12);
        assert!(norm(g) < 1e-6 * norm(g_off), "{metric:?}: {}", norm(g));
    }
}

#[test]
fn negated_target_negates_ncc_gradient() {
    let v = blob_volume();
    let k = Intrinsics::new(1000.0, 24, 24, [10.0, 10.0], [0.0, 0.0]).unwrap();
    let target = render_trilinear(
        &v,
        &make_rays(
            &k,
            &EulerPose::new(0.0, 0.0, 0.0, 0.0, -650.0, 0.0)
                .to_pose()
                .unwrap(),
        ),
        150,
    )
    .unwrap();
    let pose = EulerPose::new(5.0, 2.0, -3.0, 4.0, -640.0, 3.0)
        .to_pose()
        .unwrap();
    let cfg = SimilarityConfig::with_metric(Metric::Ncc);
    let (vp, gp) =
        similarity_gradient_wrt_pose(&target, &v, &k, &pose, 150, &cfg, Chart::Se3).unwrap();
    let (vn, gn) =
        similarity_gradient_wrt_pose(&target.map(|x| -x), &v, &k, &pose, 150, &cfg, Chart::Se3)
            .unwrap();
    assert!((vp + vn).abs() < 1e-12);
    for j in 0..6 {
        assert!((gp[j] + gn[j]).abs() <= 1e-9 * gp[j].abs(), "{j}");
    }
}

#[test]
fn landscape_peaks_at_zero_offset() {
    let ph = make_phantom(&PhantomSpec::default_sphere_in_box()).unwrap();
    let k = Intrinsics::new(1000.0, 48, 48, [4.0, 4.0], [0.0, 0.0]).unwrap();
    let center = EulerPose::new(10.0, -5.0, 3.0, 2.0, -700.0, -3.0);
    let n = 2 * ph.volume.max_dim();
    let target =
        render_trilinear(&ph.volume, &make_rays(&k, &center.to_pose().unwrap()), n).unwrap();
    let cfgs = [SimilarityConfig::with_metric(Metric::MnccGnccMean)];
    let rows = landscape(
        &target,
        &ph.volume,
        &k,
        &center,
        &[0, 1, 2, 3, 4, 5],
        60.0,
        100.0,
        13,
        n,
        &cfgs,
    )
    .unwrap();
    assert_eq!(rows.len(), 6 * 13);
    for axis in AXES {
        let best = rows
            .iter()
            .filter(|r| r.axis == axis)
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .unwrap();
        assert_eq!(best.offset, 0.0, "{axis}");
    }
    let csv = landscape_csv(&rows);
    assert!(csv.starts_with("axis,offset,metric,value\nalpha,-60,mncc_gncc_mean,"));
    assert_eq!(csv.lines().count(), 1 + 6 * 13);
}

#[test]
fn landscape_rejects_bad_arguments() {
    let v = blob_volume();
    let k = Intrinsics::new(1000.0, 8, 8, [8.0, 8.0], [0.0, 0.0]).unwrap();
    let t = Image::zeros(8, 8);
    let c = EulerPose::new(0.0, 0.0, 0.0, 0.0, -650.0, 0.0);
    let cfg = [SimilarityConfig::default()];
    assert!(landscape(&t, &v, &k, &c, &[6], 60.0, 100.0, 5, 10, &cfg).is_err());
    assert!(landscape(&t, &v, &k, &c, &[0], 60.0, 100.0, 1, 10, &cfg).is_err());
}

#[test]
fn metric_names_round_trip() {
    for m in ALL {
        assert_eq!(m.name().parse::<Metric>().unwrap(), m);
    }
    assert!("mi".parse::<Metric>().is_err());
}

fn arb_pair() -> impl Strategy<Value = (Image, Image)> {
    (3usize..20, 3usize..20, any::<u64>())
        .prop_map(|(h, w, s)| (noise(h, w, s), noise(h, w, s ^ 0x5555)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_intensity_invariance((a, b) in arb_pair(), s in 0.01f64..100.0, c in -50.0f64..50.0) {
        for m in ALL {
            let cfg = SimilarityConfig { metric: m, pyramid_levels: 1, ..Default::default() };
            let base = combined(&a, &b, &cfg).unwrap();
            prop_assert!((combined(&affine(&a, s, c), &b, &cfg).unwrap() - base).abs() < 1e-6);
            prop_assert!((combined(&a, &affine(&b, s, c), &cfg).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_and_bounded((a, b) in arb_pair(), levels in 1usize..3) {
        for m in ALL {
            let cfg = SimilarityConfig { metric: m, pyramid_levels: levels.min(if a.height.min(a.width) >= 4 { 2 } else { 1 }), ..Default::default() };
            let ab = combined(&a, &b, &cfg).unwrap();
            prop_assert!((ab - combined(&b, &a, &cfg).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
