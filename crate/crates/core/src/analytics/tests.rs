use super::*;
use crate::features::Keypoint;
use crate::matching::{Match, PairEstimate};
use crate::pose_graph::GlobalPose;
use crate::synth::{generate, BlobRecipe, MasterSource, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(w: usize, h: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
}

fn smooth_grid(w: usize, h: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy, p) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.0));
    Grid::from_fn(w, h, |r, c| (fx * c as f64 + p).sin() * (fy * r as f64).cos() * 3.0 + 5.0)
}

/// Window-by-window SSIM straight from the definition.
fn oracle_ssim(a: &Grid, b: &Grid) -> f64 {
    let (w, h) = a.dims();
    let joint = |r: usize, c: usize| a.is_valid(r, c) && b.is_valid(r, c);
    let mut vals = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if joint(r, c) {
                vals.push(a.get(r, c));
                vals.push(b.get(r, c));
            }
        }
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let l = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let (mut total, mut n) = (0.0, 0);
    for r in 0..=h - 8 {
        for c in 0..=w - 8 {
            let px: Vec<(f64, f64)> = (r..r + 8)
                .flat_map(|y| (c..c + 8).map(move |x| (y, x)))
                .filter(|&(y, x)| joint(y, x))
                .map(|(y, x)| (a.get(y, x), b.get(y, x)))
                .collect();
            if px.len() < 64 {
                continue;
            }
            let ma = px.iter().map(|p| p.0).sum::<f64>() / 64.0;
            let mb = px.iter().map(|p| p.1).sum::<f64>() / 64.0;
            let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / 64.0;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn ssim_of_identical_grids_is_one() {
    let a = smooth_grid(64, 48, 1);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let c = Grid::from_fn(16, 16, |_, _| 3.0);
    assert_eq!(ssim(&c, &c).unwrap(), 1.0);
}

#[test]
fn ssim_matches_window_oracle() {
    for seed in 0..5 {
        let mut a = smooth_grid(40, 36, seed);
        let b = Grid::from_fn(40, 36, |r, c| a.get(r, c) + 0.3 * random_grid(40, 36, 100 + seed).get(r, c));
        a.invalidate(10, 10);
        a.invalidate(30, 2);
        let got = ssim(&a, &b).unwrap();
        assert!((got - oracle_ssim(&a, &b)).abs() < 1e-9, "{got} vs {}", oracle_ssim(&a, &b));
    }
}

#[test]
fn constant_shift_lowers_luminance_only() {
    let a = smooth_grid(48, 48, 2);
    let (lo, hi) = a.valid_range().unwrap();
    let mut prev = 1.0;
    for k in [0.1, 0.5, 1.0, 2.0, 4.0] {
        let b = a.map_valid(|_, _, v| v + k);
        // Structure and contrast are unchanged, so SSIM is the mean luminance term.
        let l = hi - lo + k;
        let c1 = (0.01 * l).powi(2);
        let mut sum = 0.0;
        let mut n = 0;
        for r in 0..=40 {
            for c in 0..=40 {
                let mu: f64 = (r..r + 8).flat_map(|y| (c..c + 8).map(move |x| (y, x))).map(|(y, x)| a.get(y, x)).sum::<f64>() / 64.0;
                sum += (2.0 * mu * (mu + k) + c1) / (mu * mu + (mu + k) * (mu + k) + c1);
                n += 1;
            }
        }
        let got = ssim(&a, &b).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-9);
        assert!(got < prev);
        prev = got;
    }
}

#[test]
fn independent_noise_is_dissimilar() {
    for seed in 0..20 {
        let (a, b) = (random_grid(64, 64, 2 * seed), random_grid(64, 64, 2 * seed + 1));
        let s = ssim(&a, &b).unwrap();
        assert!(s.abs() < 0.2, "seed {seed}: {s}");
    }
}

#[test]
fn ssim_errors() {
    assert!(matches!(
        ssim(&Grid::zeros(10, 10), &Grid::zeros(10, 11)),
        Err(Error::DimensionsDiffer { .. })
    ));
    assert!(matches!(
        ssim(&Grid::invalid(10, 10), &Grid::zeros(10, 10)),
        Err(Error::NoJointlyValid)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000, w in 8usize..40, h in 8usize..40) {
        let a = random_grid(w, h, sa);
        let b = smooth_grid(w, h, sb);
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((x - y).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&x));
    }
}

fn features_with(tile: usize, n: usize) -> FeatureSet {
    let mut fs = FeatureSet::empty(tile, ChannelId::new("a").unwrap());
    let d = vec![0.0f32; crate::features::DESCRIPTOR_LEN];
    for i in 0..n {
        fs.push(
            Keypoint {
                x: i as f64,
                y: 0.0,
                scale: 1.6,
                orientation: 0.0,
                response: 1.0,
            },
            &d,
        );
    }
    fs
}

fn estimate(a: usize, b: usize, matches: usize, inliers: usize) -> PairEstimate {
    PairEstimate {
        tile_a: a,
        tile_b: b,
        transform: AffineTransform::identity(),
        inliers: (0..inliers)
            .map(|i| Match {
                idx_a: i,
                idx_b: i,
                distance: 0.0,
            })
            .collect(),
        points: vec![((0.0, 0.0), (0.0, 0.0)); inliers],
        num_matches: matches,
        confidence: 1.0,
    }
}

#[test]
fn feature_stats_arithmetic() {
    let fs = vec![features_with(0, 100), features_with(1, 200)];
    let g = PairGraph {
        nodes: vec![0, 1],
        edges: vec![estimate(0, 1, 30, 20)],
    };
    let s = feature_stats(&fs, &g);
    assert_eq!(s.mean_detected, 150.0);
    assert_eq!(s.pairs, 1);
    assert_eq!(s.mean_matched, 30.0);
    assert_eq!(s.mean_inliers, 20.0);
    assert_eq!(s.name.as_str(), "a");

    let empty = feature_stats(&[], &PairGraph { nodes: vec![], edges: vec![] });
    assert_eq!((empty.mean_detected, empty.pairs, empty.mean_matched), (0.0, 0, 0.0));
}

proptest! {
    #[test]
    fn feature_stats_ignores_tile_order(counts in prop::collection::vec(0usize..50, 1..8), rot in 0usize..8) {
        let fs: Vec<FeatureSet> = counts.iter().enumerate().map(|(i, &n)| features_with(i, n)).collect();
        let g = PairGraph { nodes: (0..counts.len()).collect(), edges: vec![estimate(0, 1, 12, 8), estimate(1, 2, 40, 33)] };
        let mut shuffled = fs.clone();
        shuffled.rotate_left(rot % counts.len());
        let mut g2 = g.clone();
        g2.edges.reverse();
        prop_assert_eq!(feature_stats(&fs, &g), feature_stats(&shuffled, &g2));
    }
}

fn truth_grid() -> BTreeMap<usize, AffineTransform> {
    (0..9)
        .map(|i| {
            let (r, c) = ((i / 3) as f64, (i % 3) as f64);
            (i, AffineTransform::rigid(0.01 * (i as f64 - 4.0), 461.0 * c + 3.0, 461.0 * r - 2.0))
        })
        .collect()
}

fn layout_from(poses: &BTreeMap<usize, AffineTransform>) -> Layout {
    Layout {
        poses: poses
            .iter()
            .map(|(&tile_index, &transform)| GlobalPose { tile_index, transform })
            .collect(),
        member_tiles: poses.keys().copied().collect(),
        reference: 4,
        residual_rms: 0.0,
    }
}

const DIMS: fn(usize) -> (usize, usize) = |_| (512, 512);

#[test]
fn registration_error_examples() {
    let truth = truth_grid();
    let e = registration_error(&layout_from(&truth), &truth, DIMS).unwrap();
    assert!(e.mean < 1e-9 && e.max < 1e-9);

    let shift = AffineTransform::translation(-120.0, 37.5);
    let moved: BTreeMap<usize, AffineTransform> = truth.iter().map(|(&k, t)| (k, shift.compose(t))).collect();
    let e = registration_error(&layout_from(&moved), &truth, DIMS).unwrap();
    assert!(e.mean < 1e-6 && e.max < 1e-6);

    let mut bumped = truth.clone();
    let t = bumped[&5];
    bumped.insert(5, AffineTransform::translation(2.0, 0.0).compose(&t));
    let e = registration_error(&layout_from(&bumped), &truth, DIMS).unwrap();
    assert!((e.max - 2.0).abs() <= 0.2, "max {}", e.max);
    assert_eq!(e.per_tile.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0, 5);
}

#[test]
fn registration_error_needs_truth_for_every_member() {
    let mut truth = truth_grid();
    let layout = layout_from(&truth);
    truth.remove(&3);
    assert!(matches!(
        registration_error(&layout, &truth, DIMS),
        Err(Error::MissingTruth(3))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn registration_error_gauge_invariance(
        c in (0.7f64..1.3, -0.3f64..0.3, -500.0f64..500.0, -0.3f64..0.3, 0.7f64..1.3, -500.0f64..500.0),
        theta in -3.1f64..3.1,
        tx in -1e3f64..1e3,
        ty in -1e3f64..1e3,
        noise_seed in 0u64..1000,
    ) {
        let truth = truth_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let est: BTreeMap<usize, AffineTransform> = truth
            .iter()
            .map(|(&k, t)| (k, AffineTransform::translation(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).compose(t)))
            .collect();
        let base = registration_error(&layout_from(&est), &truth, DIMS).unwrap();

        // Any affine on the estimate side alone is absorbed by the gauge.
        let g = AffineTransform::from_coeffs([c.0, c.1, c.2, c.3, c.4, c.5]);
        prop_assume!(g.det() > 0.3);
        let est_g: BTreeMap<usize, AffineTransform> = est.iter().map(|(&k, t)| (k, g.compose(t))).collect();
        let a = registration_error(&layout_from(&est_g), &truth, DIMS).unwrap();
        prop_assert!((a.mean - base.mean).abs() <= 1e-6 && (a.max - base.max).abs() <= 1e-6);

        // A common rigid motion of both sides preserves corner distances.
        let r = AffineTransform::rigid(theta, tx, ty);
        let both = |m: &BTreeMap<usize, AffineTransform>| -> BTreeMap<usize, AffineTransform> {
            m.iter().map(|(&k, t)| (k, r.compose(t))).collect()
        };
        let b = registration_error(&layout_from(&both(&est)), &both(&truth), DIMS).unwrap();
        prop_assert!((b.mean - base.mean).abs() <= 1e-6 && (b.max - base.max).abs() <= 1e-6);
    }
}

#[test]
fn pearson_basics() {
    let a = smooth_grid(20, 20, 3);
    assert!((pearson(&a, &a) - 1.0).abs() < 1e-12);
    let neg = a.map_valid(|_, _, v| -2.0 * v + 1.0);
    assert!((pearson(&a, &neg) + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&a, &Grid::from_fn(20, 20, |_, _| 1.0)), 0.0);
}

fn small_spec(texture_density: f64) -> SynthSpec {
    SynthSpec {
        master: MasterSource::Recipe(BlobRecipe {
            texture_density,
            ..BlobRecipe::default()
        }),
        rows: 2,
        cols: 2,
        tile_size: 192,
        overlap_frac: 0.25,
        max_translation_jitter: 2.0,
        max_rotation_jitter: 0.005,
        primary_sparsity: 0.9,
        line_noise_amp: 0.0,
        seed: 3,
    }
}

fn channel_grids(spec: &SynthSpec, name: &str) -> Vec<Grid> {
    let (tiles, _, _) = generate(spec).unwrap();
    let id = ChannelId::new(name).unwrap();
    tiles.iter().map(|t| t.channel(&id).unwrap().clone()).collect()
}

fn score(candidates: &[(ChannelId, Vec<Grid>)], primary: &[Grid]) -> Vec<ChannelScore> {
    channel_score(
        candidates,
        primary,
        &DetectorParams::default(),
        &MatchParams::default(),
        (0.5, 99.5),
        &ScoreWeights::default(),
    )
    .unwrap()
}

#[test]
fn richer_channel_ranks_first_and_scaling_is_irrelevant() {
    let rich = channel_grids(&small_spec(30.0), "amplitude");
    let poor = channel_grids(&small_spec(3.0), "amplitude");
    let primary = channel_grids(&small_spec(30.0), "topo");
    let (a, b) = (ChannelId::new("rich").unwrap(), ChannelId::new("poor").unwrap());
    let ranked = score(&[(b.clone(), poor.clone()), (a.clone(), rich.clone())], &primary);
    assert_eq!(ranked[0].channel, a);
    assert!(ranked[0].mean_matched > 3.0 * ranked[1].mean_matched, "{ranked:?}");

    let doubled: Vec<Grid> = poor.iter().map(|g| g.map_valid(|_, _, v| 2.0 * v)).collect();
    let again = score(&[(b.clone(), doubled), (a.clone(), rich)], &primary);
    let names = |r: &[ChannelScore]| r.iter().map(|s| s.channel.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ranked), names(&again));

    let single = score(&[(b.clone(), poor)], &primary);
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].channel, b);
    assert_eq!(single[0].score, 0.0);
}

#[test]
fn ties_are_broken_by_name() {
    let g = channel_grids(&small_spec(30.0), "amplitude");
    let primary = channel_grids(&small_spec(30.0), "topo");
    let ranked = score(
        &[(ChannelId::new("zeta").unwrap(), g.clone()), (ChannelId::new("alpha").unwrap(), g)],
        &primary,
    );
    assert_eq!(ranked[0].score, ranked[1].score);
    assert_eq!(ranked[0].channel.as_str(), "alpha");
}

#[test]
fn candidate_must_cover_every_tile() {
    let g = channel_grids(&small_spec(30.0), "amplitude");
    let primary = channel_grids(&small_spec(30.0), "topo");
    let short = g[..3].to_vec();
    assert!(channel_score(
        &[(ChannelId::new("x").unwrap(), short)],
        &primary,
        &DetectorParams::default(),
        &MatchParams::default(),
        (0.5, 99.5),
        &ScoreWeights::default(),
    )
    .is_err());
    assert!(channel_score(
        &[],
        &primary,
        &DetectorParams::default(),
        &MatchParams::default(),
        (0.5, 99.5),
        &ScoreWeights::default(),
    )
    .is_err());
}
