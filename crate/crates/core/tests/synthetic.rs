use nalgebra::{Matrix3, Vector3};
use s2adet::cube_io::AggregatedImage;
use s2adet::hid::{decouple, DecoupleParams};
use s2adet::synthetic::{generate, SyntheticSceneSpec};

/// Per-object mean colors, grouped by class.
fn object_means(img: &AggregatedImage, boxes: &[s2adet::boxes::GroundTruthBox], out: &mut [Vec<[f64; 3]>]) {
    for g in boxes {
        let b = g.to_pixels(img.width, img.height);
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for y in b.y_min.round() as usize..b.y_max.round() as usize {
            for x in b.x_min.round() as usize..b.x_max.round() as usize {
                let p = img.pixel(y, x);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
                n += 1.0;
            }
        }
        out[g.class_id].push(acc.map(|v| v / n));
    }
}

/// Mahalanobis distance between the two class means under the pooled
/// within-class covariance: the between-class distance in units of the
/// within-class standard deviation along the most discriminative direction.
fn separation(groups: &[Vec<[f64; 3]>]) -> f64 {
    let mean = |g: &[[f64; 3]]| Vector3::from_iterator((0..3).map(|c| g.iter().map(|v| v[c]).sum::<f64>() / g.len() as f64));
    let means: Vec<Vector3<f64>> = groups.iter().map(|g| mean(g)).collect();
    let mut cov = Matrix3::zeros();
    let mut n = 0.0;
    for (g, m) in groups.iter().zip(&means) {
        for v in g {
            let d = Vector3::from_column_slice(v) - m;
            cov += d * d.transpose();
            n += 1.0;
        }
    }
    cov /= n - groups.len() as f64;
    let diff = means[1] - means[0];
    let inv = cov.try_inverse().expect("within-class covariance is singular");
    (diff.transpose() * inv * diff)[(0, 0)].sqrt()
}

#[test]
fn class_is_separable_in_se_but_not_in_sa() {
    let spec = SyntheticSceneSpec::two_class(64, 64, 16, 2.0, 11);
    let mut sa_groups = vec![Vec::new(), Vec::new()];
    let mut se_groups = vec![Vec::new(), Vec::new()];
    for scene in generate(&spec, 32).unwrap() {
        let (sa, se) = decouple(&scene.cube, &DecoupleParams::default()).unwrap();
        object_means(&sa, &scene.boxes, &mut sa_groups);
        object_means(&se, &scene.boxes, &mut se_groups);
    }
    assert!(sa_groups.iter().all(|g| g.len() >= 10));
    let (sa, se) = (separation(&sa_groups), separation(&se_groups));
    eprintln!("separation: sa {sa:.3}, se {se:.3}");
    assert!(se > 3.0, "se separation {se}");
    assert!(sa < 3.0, "sa separation {sa}");
}
