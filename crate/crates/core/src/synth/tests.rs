use super::*;
use proptest::prelude::*;
use rand::Rng;

fn still(spec: SynthSpec) -> SynthSpec {
    SynthSpec {
        max_translation_jitter: 0.0,
        max_rotation_jitter: 0.0,
        ..spec
    }
}

fn small() -> SynthSpec {
    SynthSpec {
        tile_size: 128,
        ..SynthSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
    let c = generate(&SynthSpec { seed: 8, ..small() }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn single_tile_is_a_master_crop() {
    let master = blob_master(150, 140, 60, 4);
    let spec = still(SynthSpec {
        master: MasterSource::Grid(master.clone()),
        rows: 1,
        cols: 1,
        tile_size: 100,
        primary_sparsity: 0.0,
        line_noise_amp: 0.0,
        ..SynthSpec::default()
    });
    let (tiles, channels, truth) = generate(&spec).unwrap();
    assert_eq!(tiles.len(), 1);
    let (ox, oy) = (25usize, 20usize);
    assert_eq!(truth.true_poses[0], AffineTransform::translation(ox as f64, oy as f64));
    assert!(truth.adjacency.is_empty());
    let topo = tiles[0].channel(&channels[0]).unwrap();
    for r in 0..100 {
        for c in 0..100 {
            assert!((topo.get(r, c) - master.get(r + oy, c + ox)).abs() < 1e-9);
        }
    }
    assert!(matches!(generate_stack(&spec), Err(Error::TooFewTiles(1))));
}

#[test]
fn zero_jitter_grid_is_regular() {
    let spec = still(small());
    let (_, _, truth) = generate(&spec).unwrap();
    let step = (128.0f64 * 0.9).round();
    assert_eq!(spec.step() as f64, step);
    let p0 = truth.true_poses[0];
    for (i, p) in truth.true_poses.iter().enumerate() {
        let (r, c) = ((i / 3) as f64, (i % 3) as f64);
        assert_eq!(*p, AffineTransform::translation(p0.tx + c * step, p0.ty + r * step));
    }
    let expected: Vec<(usize, usize)> = vec![
        (0, 1),
        (0, 3),
        (1, 2),
        (1, 4),
        (2, 5),
        (3, 4),
        (3, 6),
        (4, 5),
        (4, 7),
        (5, 8),
        (6, 7),
        (7, 8),
    ];
    assert_eq!(truth.adjacency, expected);
}

#[test]
fn jittered_neighbours_keep_half_their_overlap() {
    for seed in 0..10 {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let (_, _, truth) = generate(&spec).unwrap();
        assert_eq!(truth.adjacency.len(), 12, "seed {seed}");
        for &(a, b) in &truth.adjacency {
            let area = polygon_intersection_area(
                &footprint(&truth.true_poses[a], 512),
                &footprint(&truth.true_poses[b], 512),
            );
            assert!(area >= 0.5 * spec.nominal_overlap_area(), "seed {seed} pair ({a}, {b}): {area}");
        }
    }
}

/// Area of `a ∩ b` by sampling a fine lattice over the bounding box.
fn lattice_area(a: &[Point], b: &[Point], step: f64) -> f64 {
    let inside = |poly: &[Point], p: Point| {
        let s = signed_area(poly).signum();
        (0..poly.len()).all(|i| {
            let (u, v) = (poly[i], poly[(i + 1) % poly.len()]);
            s * ((v.0 - u.0) * (p.1 - u.1) - (v.1 - u.1) * (p.0 - u.0)) >= 0.0
        })
    };
    let xs = a.iter().chain(b).map(|p| p.0);
    let ys = a.iter().chain(b).map(|p| p.1);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let mut hits = 0usize;
    let mut y = y0 + step / 2.0;
    while y < y1 {
        let mut x = x0 + step / 2.0;
        while x < x1 {
            if inside(a, (x, y)) && inside(b, (x, y)) {
                hits += 1;
            }
            x += step;
        }
        y += step;
    }
    hits as f64 * step * step
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn polygon_area_matches_lattice_count(
        t1 in -0.3f64..0.3, t2 in -0.3f64..0.3,
        dx in -60.0f64..60.0, dy in -60.0f64..60.0,
    ) {
        let a = footprint(&AffineTransform::rigid(t1, 0.0, 0.0), 64);
        let b = footprint(&AffineTransform::rigid(t2, dx, dy), 64);
        let exact = polygon_intersection_area(&a, &b);
        let approx = lattice_area(&a, &b, 0.25);
        // Lattice error is bounded by the perimeter times the cell size.
        prop_assert!((exact - approx).abs() <= 8.0 * 64.0 * 0.25 + 1.0, "{} vs {}", exact, approx);
        prop_assert!((exact - polygon_intersection_area(&b, &a)).abs() < 1e-6);
    }
}

#[test]
fn adjacency_is_the_substantial_footprint_overlaps() {
    let spec = SynthSpec { seed: 3, ..SynthSpec::default() };
    let (_, _, truth) = generate(&spec).unwrap();
    let prints: Vec<[Point; 4]> = truth.true_poses.iter().map(|p| footprint(p, 512)).collect();
    let mut touching = Vec::new();
    for a in 0..9 {
        for b in a + 1..9 {
            let area = lattice_area(&prints[a], &prints[b], 1.0);
            if area > 0.0 {
                touching.push((a, b, area));
            }
        }
    }
    let substantial: Vec<(usize, usize)> = touching
        .iter()
        .filter(|t| t.2 >= ADJACENCY_MIN_FRACTION * spec.nominal_overlap_area())
        .map(|t| (t.0, t.1))
        .collect();
    assert_eq!(truth.adjacency, substantial);
    // Whatever else touches is a diagonal neighbour sharing a corner patch.
    for &(a, b, _) in &touching {
        if !truth.adjacency.contains(&(a, b)) {
            assert!((a / 3).abs_diff(b / 3) == 1 && (a % 3).abs_diff(b % 3) == 1, "({a}, {b})");
        }
    }
}

#[test]
fn channels_follow_the_sparsity_dial() {
    let spec = still(SynthSpec {
        line_noise_amp: 0.0,
        ..small()
    });
    let (dense, ch, _) = generate(&SynthSpec {
        primary_sparsity: 0.0,
        ..spec.clone()
    })
    .unwrap();
    let (sparse, _, _) = generate(&SynthSpec {
        primary_sparsity: 1.0,
        ..spec
    })
    .unwrap();
    // The secondary channel ignores sparsity and is the x-derivative of the full topography.
    assert_eq!(dense[0].channel(&ch[1]), sparse[0].channel(&ch[1]));
    let dx = crate::preprocess::derive_x(dense[0].channel(&ch[0]).unwrap()).unwrap();
    assert_eq!(dense[0].channel(&ch[1]).unwrap(), &dx);
    let energy = |g: &Grid| crate::preprocess::derive_x(g).unwrap().valid_values().map(|v| v * v).sum::<f64>();
    assert!(energy(dense[0].channel(&ch[0]).unwrap()) > 10.0 * energy(sparse[0].channel(&ch[0]).unwrap()));
}

#[test]
fn line_noise_is_a_row_offset() {
    let base = still(SynthSpec {
        line_noise_amp: 0.0,
        ..small()
    });
    let noisy = SynthSpec {
        line_noise_amp: 0.05,
        ..base.clone()
    };
    let (a, ch, _) = generate(&base).unwrap();
    let (b, _, _) = generate(&noisy).unwrap();
    let (ga, gb) = (a[4].channel(&ch[0]).unwrap(), b[4].channel(&ch[0]).unwrap());
    for r in 0..128 {
        let off = gb.get(r, 0) - ga.get(r, 0);
        assert!(off.abs() <= 0.05);
        for c in 0..128 {
            assert!((gb.get(r, c) - ga.get(r, c) - off).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        SynthSpec { rows: 0, ..small() },
        SynthSpec { overlap_frac: 0.0, ..small() },
        SynthSpec { primary_sparsity: 1.5, ..small() },
        SynthSpec { max_rotation_jitter: 0.5, ..small() },
        SynthSpec { tile_size: 8, ..small() },
        SynthSpec {
            master: MasterSource::Grid(Grid::zeros(100, 100)),
            ..small()
        },
    ] {
        assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))), "{:?}", bad.rows);
    }
}

#[test]
fn blob_master_examples() {
    let empty = blob_master(40, 30, 0, 1);
    assert!(empty.valid_values().all(|v| v == 0.0));

    // The single blob's centre is the first pair of draws from the seeded stream.
    let seed = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = (rng.gen_range(0.0..80.0), rng.gen_range(0.0..60.0));
    let g = blob_master(80, 60, 1, seed);
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for r in 0..60 {
        for c in 0..80 {
            if g.get(r, c) > best {
                best = g.get(r, c);
                at = (c, r);
            }
        }
    }
    assert!((at.0 as f64 - x).hypot(at.1 as f64 - y) <= 1.0, "max at {at:?}, centre ({x}, {y})");
    assert!(best > 0.0 && best <= 1.0, "amplitude {best}");

    assert_ne!(blob_master(50, 50, 20, 1), blob_master(50, 50, 20, 2));
    assert_eq!(blob_master(50, 50, 20, 1), blob_master(50, 50, 20, 1));
}

#[test]
fn truth_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (stack, truth) = generate_stack(&SynthSpec {
        rows: 1,
        cols: 2,
        ..small()
    })
    .unwrap();
    let manifest = write_synth(&stack, &truth, dir.path()).unwrap();
    assert_eq!(GroundTruth::load(&dir.path().join(TRUTH_FILE)).unwrap(), truth);
    let back = crate::tile_store::load_stack(&manifest).unwrap();
    assert_eq!(back.meta[TRUTH_META_KEY], TRUTH_FILE);
    assert_eq!(back.tiles.len(), 2);
}
