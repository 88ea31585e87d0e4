use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// ARI from the four pair-agreement counts, enumerating all pairs.
fn pair_oracle(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (ss * dd - sd * ds) / den
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

#[test]
fn ari_examples() {
    assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert!((ari(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap() - 4.0 / 7.0).abs() < 1e-12);
    assert!((pair_oracle(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 4.0 / 7.0).abs() < 1e-12);
    assert_eq!(ari(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
    assert_eq!(ari(&[5, 5, 5], &["x", "x", "x"]).unwrap(), 1.0);
    assert!(matches!(ari(&[0, 1], &[0]), Err(AnalysisError::LengthMismatch(2, 1))));
    assert!(ari(&[0], &[0]).is_err());
}

#[test]
fn kmeans_one_cluster_per_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_points(&mut rng, 9, 3);
    let out = kmeans(x.view(), 9, 4, KMeansOptions::default()).unwrap();
    assert_eq!(out.inertia, 0.0);
    let mut labels = out.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, (0..9).collect::<Vec<_>>());
}

#[test]
fn kmeans_single_cluster_is_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_points(&mut rng, 20, 4);
    let out = kmeans(x.view(), 1, 0, KMeansOptions::default()).unwrap();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for (c, m) in out.centroids.row(0).iter().zip(&mean) {
        assert!((c - m).abs() < 1e-12);
    }
}

#[test]
fn kmeans_finds_separated_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(4..=10);
        let split = rng.random_range(1..n);
        let mut x = random_points(&mut rng, n, 2) * 0.1;
        for i in split..n {
            x[[i, 0]] += 10.0;
        }
        // exhaustive search over 2-partitions for the least within-group scatter
        let scatter = |mask: u32| {
            let mut total = 0.0;
            for side in [0, 1] {
                let idx: Vec<usize> = (0..n).filter(|&i| (mask >> i & 1) == side).collect();
                if idx.is_empty() {
                    return f64::INFINITY;
                }
                let mut c = [0.0; 2];
                for &i in &idx {
                    c[0] += x[[i, 0]] / idx.len() as f64;
                    c[1] += x[[i, 1]] / idx.len() as f64;
                }
                total += idx.iter().map(|&i| (x[[i, 0]] - c[0]).powi(2) + (x[[i, 1]] - c[1]).powi(2)).sum::<f64>();
            }
            total
        };
        let best = (1..(1u32 << n) - 1).min_by(|&a, &b| scatter(a).total_cmp(&scatter(b))).unwrap();
        let best_labels: Vec<usize> = (0..n).map(|i| (best >> i & 1) as usize).collect();
        let out = kmeans(x.view(), 2, rng.random(), KMeansOptions::default()).unwrap();
        assert_eq!(ari(&out.labels, &best_labels).unwrap(), 1.0);
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= split)).collect();
        assert_eq!(ari(&out.labels, &truth).unwrap(), 1.0);
    }
}

#[test]
fn kmeans_rejects_bad_k_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_points(&mut rng, 30, 5);
    assert!(matches!(kmeans(x.view(), 0, 0, KMeansOptions::default()), Err(AnalysisError::InvalidK { .. })));
    assert!(kmeans(x.view(), 31, 0, KMeansOptions::default()).is_err());
    let a = kmeans(x.view(), 4, 9, KMeansOptions::default()).unwrap();
    assert_eq!(a, kmeans(x.view(), 4, 9, KMeansOptions::default()).unwrap());
}

#[test]
fn kmeans_handles_duplicate_points() {
    let x = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
    let out = kmeans(x.view(), 3, 0, KMeansOptions::default()).unwrap();
    let mut used = out.labels.clone();
    used.sort_unstable();
    used.dedup();
    assert_eq!(used.len(), 3);
    assert_eq!(out.inertia, 0.0);
}

#[test]
fn two_point_affinities_are_one_half() {
    let x = array![[0.0, 0.0], [3.0, 4.0]];
    let a = joint_affinities(x.view(), 30.0).unwrap();
    assert_eq!(a.p, array![[0.0, 0.5], [0.5, 0.0]]);
}

#[test]
fn affinity_rows_hit_target_perplexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, perp) in [(40, 10.0), (100, 30.0), (12, 30.0)] {
        let x = random_points(&mut rng, n, 6);
        let a = joint_affinities(x.view(), perp).unwrap();
        let target = perp.min((n - 1) as f64 / 3.0);
        assert_eq!(a.perplexity, target);
        for (i, &beta) in a.betas.iter().enumerate() {
            let got = conditional_perplexity(x.view(), i, beta);
            assert!((got - target).abs() < PERPLEXITY_TOLERANCE, "row {i}: {got} vs {target}");
        }
        assert!((a.p.sum() - 1.0).abs() < 1e-9);
        assert!(a.p.iter().all(|&v| v >= 0.0));
        assert_eq!(a.p, a.p.t());
    }
}

#[test]
fn tsne_is_deterministic_and_separates_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = random_points(&mut rng, 40, 5) * 0.2;
    let labels: Vec<String> = (0..40).map(|i| if i < 20 { "a".into() } else { "b".into() }).collect();
    for i in 20..40 {
        x[[i, 0]] += 5.0;
    }
    let opts = TsneOptions {
        perplexity: 10.0,
        iterations: 400,
        seed: 3,
        ..TsneOptions::default()
    };
    let a = tsne(x.view(), &labels, &opts).unwrap();
    assert_eq!(a, tsne(x.view(), &labels, &opts).unwrap());
    assert!(a.points.iter().all(|v| v.is_finite()));
    let coords = a.points.clone();
    let km = kmeans(coords.view(), 2, 0, KMeansOptions::default()).unwrap();
    assert_eq!(ari(&km.labels, &labels).unwrap(), 1.0);
    assert!(matches!(
        tsne(x.slice(ndarray::s![..3, ..]), &labels[..3], &opts),
        Err(AnalysisError::TooFewPoints { .. })
    ));
}

fn projection(points: Vec<[f64; 2]>, labels: &[&str]) -> Projection2D {
    let n = points.len();
    Projection2D {
        points: Array2::from_shape_vec((n, 2), points.into_iter().flatten().collect()).unwrap(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn svg_counts_markers_and_legend() {
    let p = projection(vec![[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]], &["S02", "S01", "S02"]);
    let svg = render_scatter_svg(&p);
    assert_eq!(svg.matches("<circle").count(), 3);
    assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
    assert!(svg.contains(PALETTE[0]) && svg.contains(PALETTE[1]));
    assert_eq!(svg, render_scatter_svg(&p.clone()));

    let empty = render_scatter_svg(&projection(vec![], &[]));
    assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
    assert!(empty.contains("<line"));
    assert_eq!(empty.matches("<circle").count(), 0);
}

#[test]
fn svg_palette_cycles_and_escapes() {
    let labels: Vec<String> = (0..25).map(|i| format!("L{i:02}<")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let p = projection((0..25).map(|i| [i as f64, 0.0]).collect(), &refs);
    let svg = render_scatter_svg(&p);
    assert_eq!(svg.matches(PALETTE[0]).count(), 4); // L00, L22 markers and legend swatches
    assert!(svg.contains("L00&lt;"));
}

#[test]
fn emit_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = projection(vec![[0.0, 0.0], [1.0, 1.0]], &["a", "b"]);
    let (f1, f2) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    emit_scatter_svg(&p, &f1).unwrap();
    emit_scatter_svg(&p, &f2).unwrap();
    assert_eq!(std::fs::read(f1).unwrap(), std::fs::read(f2).unwrap());
    assert!(matches!(
        emit_scatter_svg(&p, &dir.path().join("missing/x.svg")),
        Err(AnalysisError::Io(_))
    ));
}

#[test]
fn csv_export_has_header_and_rows() {
    let mut out = Vec::new();
    let pts = array![[0.5, -1.0], [2.0, 3.0]];
    write_assignments_csv(&mut out, &["a".into(), "b,c".into()], &[1, 0], Some(pts.view())).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, "sequence_id,label,cluster,x,y\n0,a,1,0.5,-1\n1,\"b,c\",0,2,3\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ari_matches_pair_oracle(pairs in prop::collection::vec((0usize..4, 0usize..5), 2..=12)) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let v = ari(&a, &b).unwrap();
        prop_assert!((v - pair_oracle(&a, &b)).abs() < 1e-12);
        prop_assert!((v - ari(&b, &a).unwrap()).abs() < 1e-12);
        let renamed: Vec<String> = a.iter().map(|l| format!("k{}", 9 - l)).collect();
        prop_assert!((v - ari(&renamed, &b).unwrap()).abs() < 1e-12);
        prop_assert!(v <= 1.0 + 1e-12 && v >= -1.0);
    }

    #[test]
    fn kmeans_inertia_never_increases(n in 3usize..40, d in 1usize..5, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, n, d);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut trace = Vec::new();
        let out = kmeans_observed(x.view(), k, seed, KMeansOptions::default(), |_, v| trace.push(v)).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", trace);
        }
        prop_assert_eq!(*trace.last().unwrap(), out.inertia);
        prop_assert!(out.labels.iter().all(|&l| l < k));
    }
}
