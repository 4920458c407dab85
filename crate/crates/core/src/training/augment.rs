use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use crate::error::Result;
use crate::geometry::PointCloud;

/// Rotates coordinates (and the first three channels when
/// `rotate_normals`) by `angle` about the z axis.
pub fn rotate_z(cloud: &PointCloud, angle: f64, rotate_normals: bool) -> Result<PointCloud> {
    let (s, c) = angle.sin_cos();
    let coords = cloud
        .coords()
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    let out = cloud.with_coords(coords)?;
    let k = cloud.num_channels();
    if !rotate_normals || k < 3 {
        return Ok(out);
    }
    let mut ch = cloud.channels().to_vec();
    for row in ch.chunks_mut(k) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    out.with_channels(ch)
}

/// Adds i.i.d. Gaussian noise to every coordinate, clipped to
/// `[-clip, clip]` when given.
pub fn jitter<R: Rng>(cloud: &PointCloud, sigma: f64, clip: Option<f64>, rng: &mut R) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    let mut draw = || {
        let e: f64 = normal.sample(rng);
        clip.map_or(e, |c| e.clamp(-c, c))
    };
    let coords = cloud
        .coords()
        .iter()
        .map(|p| [p[0] + draw(), p[1] + draw(), p[2] + draw()])
        .collect();
    cloud.with_coords(coords)
}

/// Training-time augmentation: a uniform random rotation about z, then
/// coordinate jitter.
pub fn augment<R: Rng>(cloud: &PointCloud, config: &TrainConfig, rng: &mut R) -> Result<PointCloud> {
    let rotated = if config.rotate_z {
        let angle = rng.random_range(0.0..2.0 * PI);
        rotate_z(cloud, angle, config.rotate_normals)?
    } else {
        cloud.clone()
    };
    jitter(&rotated, config.jitter_sigma, config.jitter_clip, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> PointCloud {
        let coords = vec![[1.0, 0.0, 0.0], [0.3, -2.0, 5.0], [-1.5, 0.5, -0.25]];
        PointCloud::new(coords, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.6, 0.8, 0.0], 3, None).unwrap()
    }

    #[test]
    fn no_rotation_no_jitter_is_identity() {
        let cfg = TrainConfig {
            rotate_z: false,
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let c = cloud();
        assert_eq!(augment(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), c);
        assert_eq!(rotate_z(&c, 0.0, true).unwrap(), c);
    }

    #[test]
    fn half_turn() {
        let r = rotate_z(&cloud(), PI, true).unwrap();
        let p = r.coords()[0];
        assert!((p[0] + 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 0.0);
        assert!((r.channel_row(0)[0] + 1.0).abs() < 1e-12);
        let kept = rotate_z(&cloud(), PI, false).unwrap();
        assert_eq!(kept.channels(), cloud().channels());
    }

    #[test]
    fn rotation_fixes_z() {
        let c = cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TrainConfig {
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let r = augment(&c, &cfg, &mut rng).unwrap();
        for (a, b) in c.coords().iter().zip(r.coords()) {
            assert!((a[2] - b[2]).abs() < 1e-12);
            let ra = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let rb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((ra - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_statistics_and_clip() {
        let big = PointCloud::from_coords(vec![[0.0; 3]; 20000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = jitter(&big, 0.02, None, &mut rng).unwrap();
        let vals: Vec<f64> = j.coords().iter().flatten().copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 4.0 * 0.02 / n.sqrt());
        assert!((sd - 0.02).abs() < 0.02 * 0.02);
        let c = jitter(&big, 0.02, Some(0.01), &mut rng).unwrap();
        assert!(c.coords().iter().flatten().all(|v| v.abs() <= 0.01));
    }
}
