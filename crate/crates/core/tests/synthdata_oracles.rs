use std::collections::HashSet;
use std::f64::consts::PI;

use inaad_core::synthdata::{render_clean, SeverityRanges};
use inaad_core::{
    build_splits, generate_anomalous, generate_normal, AnomalyKind, AnomalySpec, Mask, PhantomParams, Split,
    SplitCounts,
};

/// Semi-axes of the reconstructed region from its second moments; a
/// filled ellipse with semi-axes (a, b) has covariance eigenvalues a²/4
/// and b²/4.
fn fitted_axes(mask: &Mask) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = (0..mask.height())
        .flat_map(|r| (0..mask.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| !mask.get(r, c))
        .map(|(r, c)| (r as f64, c as f64))
        .collect();
    let n = pts.len() as f64;
    let (my, mx) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in &pts {
        syy += (y - my).powi(2) / n;
        sxx += (x - mx).powi(2) / n;
        sxy += (y - my) * (x - mx) / n;
    }
    let mid = (syy + sxx) / 2.0;
    let disc = (((syy - sxx) / 2.0).powi(2) + sxy * sxy).sqrt();
    (2.0 * (mid + disc).sqrt(), 2.0 * (mid - disc).sqrt())
}

#[test]
fn head_area_lies_within_the_axis_range_bound() {
    let p = PhantomParams::default();
    let lo = PI * p.skull_a.lo() * p.skull_b.lo();
    let hi = PI * p.skull_a.hi() * p.skull_b.hi();
    // one pixel of perimeter slack
    let slack = 2.0 * PI * p.skull_b.hi() / p.side as f64;
    for seed in 0..40 {
        let (_, mask) = generate_normal(seed, &p).unwrap();
        let inside = mask.reconstructed_fraction();
        assert!(inside > lo - slack && inside < hi + slack, "seed {seed}: {inside} not in [{lo}, {hi}]");
    }
}

#[test]
fn shrunken_head_scales_the_fitted_ellipse() {
    let p = PhantomParams::default();
    for seed in 0..10 {
        let (_, normal) = generate_normal(seed, &p).unwrap();
        let (_, shrunk, _) = generate_anomalous(seed, &p, &AnomalySpec::new(AnomalyKind::ShrunkenHead, 0.3)).unwrap();
        let (a0, b0) = fitted_axes(&normal);
        let (a1, b1) = fitted_axes(&shrunk);
        assert!((a1 / a0 - 0.7).abs() < 0.03, "seed {seed}: major ratio {}", a1 / a0);
        assert!((b1 / b0 - 0.7).abs() < 0.03, "seed {seed}: minor ratio {}", b1 / b0);
    }
}

#[test]
fn anomalies_only_change_pixels_inside_their_region() {
    let p = PhantomParams::default();
    for (i, kind) in AnomalyKind::ALL.iter().enumerate() {
        for seed in 0..5u64 {
            let seed = seed + 10 * i as u64;
            let severity = if *kind == AnomalyKind::ShrunkenHead { 0.3 } else { 0.9 };
            let spec = AnomalySpec::new(*kind, severity);
            for speckle in [false, true] {
                let (normal, anomalous, region) = if speckle {
                    let (x, _) = generate_normal(seed, &p).unwrap();
                    let (y, _, region) = generate_anomalous(seed, &p, &spec).unwrap();
                    (x, y, region)
                } else {
                    let x = render_clean(seed, &p, None).unwrap().image;
                    let y = render_clean(seed, &p, Some(&spec)).unwrap();
                    (x, y.image, y.region.unwrap())
                };
                let mut changed = 0;
                for r in 0..p.side {
                    for c in 0..p.side {
                        let d = (normal.get(r, c) - anomalous.get(r, c)).abs();
                        if d > 0.0 {
                            changed += 1;
                            assert!(region.contains(r, c), "{} seed {seed}: ({r}, {c}) changed outside region", kind.name());
                        }
                    }
                }
                assert!(changed > 0, "{} seed {seed} changed nothing", kind.name());
            }
        }
    }
}

#[test]
fn localized_anomalies_keep_the_mask() {
    let p = PhantomParams::default();
    for kind in AnomalyKind::ALL.into_iter().filter(|k| *k != AnomalyKind::ShrunkenHead) {
        let (_, normal) = generate_normal(3, &p).unwrap();
        let (_, mask, _) = generate_anomalous(3, &p, &AnomalySpec::new(kind, 1.0)).unwrap();
        assert_eq!(normal, mask, "{}", kind.name());
    }
}

#[test]
fn default_splits_are_balanced_with_distinct_seeds() {
    let counts = SplitCounts::default();
    let m = build_splits(17, &counts, &SeverityRanges::default()).unwrap();
    assert_eq!(m.entries.len(), counts.train + counts.val_id + counts.test_id + counts.val_ood + counts.test_ood);
    let seeds: HashSet<u64> = m.entries.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), m.entries.len());
    let ids: HashSet<&str> = m.entries.iter().map(|e| e.image_id.as_str()).collect();
    assert_eq!(ids.len(), m.entries.len());
    for split in [Split::Val, Split::Test] {
        let ood: Vec<_> = m.split(split).filter(|e| e.label == 1).collect();
        for kind in AnomalyKind::ALL {
            let n = ood.iter().filter(|e| e.group == kind.name()).count() as f64;
            assert!((n - ood.len() as f64 / 4.0).abs() <= 1.0, "{:?} {}: {n}", split, kind.name());
        }
    }
    assert!(m.split(Split::Train).all(|e| e.label == 0 && e.group == "normal"));
}
