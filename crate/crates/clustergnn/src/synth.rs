//! Synthetic correspondence data: random bounded homographies, latent-identity
//! descriptors, and reprojection-based ground-truth labeling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::matrix::Matrix;

/// Row-major 3×3 planar homography.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    pub h: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Homography { h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let h = &self.h;
        let w = h[6] * p[0] + h[7] * p[1] + h[8];
        [
            (h[0] * p[0] + h[1] * p[1] + h[2]) / w,
            (h[3] * p[0] + h[4] * p[1] + h[5]) / w,
        ]
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-9
    }
}

/// Fixed random linear embedding from latent point identities to descriptor
/// space, shared by the whole dataset so that matching is learnable.
#[derive(Clone, Debug)]
pub struct DescriptorModel {
    embed: Matrix<f32>,
    latent_dim: usize,
    /// Per-observation Gaussian noise in descriptor space, relative to unit
    /// descriptors.
    pub noise: f64,
}

impl DescriptorModel {
    pub fn new(descriptor_dim: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de5c);
        let latent_dim = descriptor_dim;
        let embed = Matrix::from_fn(latent_dim, descriptor_dim, |_, _| {
            gaussian(&mut rng) as f32 / (latent_dim as f32).sqrt()
        });
        DescriptorModel { embed, latent_dim, noise }
    }

    /// One noisy observation of a latent identity, L2-normalized.
    fn observe(&self, latent: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let d = self.embed.cols();
        let mut out = vec![0f32; d];
        for (k, &z) in latent.iter().enumerate() {
            for (o, &e) in out.iter_mut().zip(self.embed.row(k)) {
                *o += z * e;
            }
        }
        for o in out.iter_mut() {
            *o += (self.noise * gaussian(rng)) as f32;
        }
        let norm = out.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for o in out.iter_mut() {
                *o = (*o as f64 / norm) as f32;
            }
        }
        out
    }

    fn sample_latent(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..self.latent_dim).map(|_| gaussian(rng) as f32).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A generated image pair with its ground-truth transform and the inlier
/// correspondences recorded at construction.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub kp_a: KeypointSet,
    pub kp_b: KeypointSet,
    /// Maps image-a pixel coordinates into image-b's frame.
    pub transform: Homography,
    pub noise_px: f64,
    pub outlier_frac: f64,
    /// `(i, j)` index pairs that correspond under the transform.
    pub inliers: Vec<(usize, usize)>,
    pub image_size: (u32, u32),
}

/// Reprojection-labeled supervision sets. Pairs falling in the dead zone
/// between the match and non-match thresholds are excluded from the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
    pub undecided_a: Vec<usize>,
    pub undecided_b: Vec<usize>,
}

fn sample_homography(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Homography {
    let angle = rng.gen_range(-0.5f64..0.5);
    let scale = rng.gen_range(0.85f64..1.18);
    let tx = rng.gen_range(-0.08 * w..0.08 * w);
    let ty = rng.gen_range(-0.08 * h..0.08 * h);
    let px = rng.gen_range(-1.5e-4..1.5e-4);
    let py = rng.gen_range(-1.5e-4..1.5e-4);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (c, s) = (angle.cos() * scale, angle.sin() * scale);
    // similarity about the image center plus a small perspective term
    let h00 = c;
    let h01 = -s;
    let h10 = s;
    let h11 = c;
    let h02 = cx - c * cx + s * cy + tx;
    let h12 = cy - s * cx - c * cy + ty;
    Homography { h: [h00, h01, h02, h10, h11, h12, px, py, 1.0] }
}

/// Generates a correspondence pair: uniform keypoints in a virtual image, a
/// bounded random homography, Gaussian pixel noise on inliers, and a fraction
/// of outliers replaced by fresh unrelated points. Deterministic per seed.
pub fn generate_pair(
    seed: u64,
    n_keypoints: usize,
    noise_px: f64,
    outlier_frac: f64,
    model: &DescriptorModel,
) -> Result<SyntheticPair> {
    generate_pair_sized(seed, n_keypoints, noise_px, outlier_frac, model, (640, 480))
}

pub fn generate_pair_sized(
    seed: u64,
    n_keypoints: usize,
    noise_px: f64,
    outlier_frac: f64,
    model: &DescriptorModel,
    image_size: (u32, u32),
) -> Result<SyntheticPair> {
    if !(0.0..=1.0).contains(&outlier_frac) {
        return Err(Error::Degenerate(format!("outlier_frac {outlier_frac} outside [0, 1]")));
    }
    if n_keypoints == 0 {
        return Err(Error::Degenerate("need at least one keypoint".into()));
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Resample until the homography is invertible and keeps enough overlap.
    let mut transform = None;
    for _ in 0..10 {
        let cand = sample_homography(&mut rng, w, h);
        if !cand.is_invertible() {
            continue;
        }
        let margin = 2.0;
        let inside = |p: [f64; 2]| {
            p[0] >= margin && p[0] < w - margin && p[1] >= margin && p[1] < h - margin
        };
        let mut kept = 0;
        for _ in 0..64 {
            let p = [rng.gen_range(0.0..w), rng.gen_range(0.0..h)];
            if inside(cand.apply(p)) {
                kept += 1;
            }
        }
        if kept >= 32 {
            transform = Some(cand);
            break;
        }
    }
    let transform = transform.ok_or_else(|| {
        Error::Degenerate("no usable homography after 10 draws".into())
    })?;

    let margin = 2.0;
    let inside = |p: [f64; 2]| {
        p[0] >= margin && p[0] < w - margin && p[1] >= margin && p[1] < h - margin
    };

    // Base points that stay in frame under the transform.
    let mut pts_a = Vec::with_capacity(n_keypoints);
    let mut pts_b = Vec::with_capacity(n_keypoints);
    let mut guard = 0usize;
    while pts_a.len() < n_keypoints {
        guard += 1;
        if guard > 100 * n_keypoints {
            return Err(Error::Degenerate("could not place keypoints inside both frames".into()));
        }
        let p = [rng.gen_range(margin..w - margin), rng.gen_range(margin..h - margin)];
        let q = transform.apply(p);
        if inside(q) {
            pts_a.push(p);
            pts_b.push([
                (q[0] + noise_px * gaussian(&mut rng)).clamp(0.0, w - 1.0),
                (q[1] + noise_px * gaussian(&mut rng)).clamp(0.0, h - 1.0),
            ]);
        }
    }

    let mut latents: Vec<Vec<f32>> = (0..n_keypoints).map(|_| model.sample_latent(&mut rng)).collect();
    let mut is_outlier = vec![false; n_keypoints];
    let n_outliers = (outlier_frac * n_keypoints as f64).round() as usize;
    for i in 0..n_outliers.min(n_keypoints) {
        is_outlier[i] = true;
        // The b-side point moves somewhere unrelated with a fresh identity.
        pts_b[i] = [rng.gen_range(margin..w - margin), rng.gen_range(margin..h - margin)];
        latents.push(model.sample_latent(&mut rng));
    }

    let mut desc_a = Vec::with_capacity(n_keypoints);
    let mut desc_b = Vec::with_capacity(n_keypoints);
    let mut fresh = n_keypoints;
    for i in 0..n_keypoints {
        desc_a.push(model.observe(&latents[i], &mut rng));
        if is_outlier[i] {
            desc_b.push(model.observe(&latents[fresh], &mut rng));
            fresh += 1;
        } else {
            desc_b.push(model.observe(&latents[i], &mut rng));
        }
    }

    // Shuffle image b so matching carries no index structure.
    let mut order: Vec<usize> = (0..n_keypoints).collect();
    for i in (1..n_keypoints).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut inliers = Vec::new();
    let mut b_coords = vec![[0f32; 2]; n_keypoints];
    let mut b_desc = vec![Vec::new(); n_keypoints];
    for (new_j, &old) in order.iter().enumerate() {
        b_coords[new_j] = [pts_b[old][0] as f32, pts_b[old][1] as f32];
        b_desc[new_j] = std::mem::take(&mut desc_b[old]);
        if !is_outlier[old] {
            inliers.push((old, new_j));
        }
    }
    inliers.sort_unstable();

    let scores_a: Vec<f32> = (0..n_keypoints).map(|_| rng.gen_range(0.3..1.0)).collect();
    let scores_b: Vec<f32> = (0..n_keypoints).map(|_| rng.gen_range(0.3..1.0)).collect();

    let d = model.embed.cols();
    let kp_a = KeypointSet {
        coords: pts_a.iter().map(|p| [p[0] as f32, p[1] as f32]).collect(),
        scores: scores_a,
        descriptors: Matrix::from_rows(&desc_a),
    };
    let kp_b = KeypointSet {
        coords: b_coords,
        scores: scores_b,
        descriptors: Matrix::from_rows(&b_desc),
    };
    debug_assert_eq!(kp_a.descriptor_dim(), d);

    Ok(SyntheticPair {
        kp_a,
        kp_b,
        transform,
        noise_px,
        outlier_frac,
        inliers,
        image_size,
    })
}

/// Labels a pair by cross-projection error: matches under `eps_match` pixels
/// (mutual nearest neighbors), unmatched beyond `eps_nonmatch`, a dead zone
/// in between.
pub fn label_ground_truth(
    pair: &SyntheticPair,
    eps_match: f64,
    eps_nonmatch: f64,
) -> Result<GroundTruth> {
    if !pair.transform.is_invertible() {
        return Err(Error::Degenerate("ground-truth transform is not invertible".into()));
    }
    let n = pair.kp_a.len();
    let m = pair.kp_b.len();
    let proj: Vec<[f64; 2]> = pair
        .kp_a
        .coords
        .iter()
        .map(|&[x, y]| pair.transform.apply([x as f64, y as f64]))
        .collect();
    let dist = |i: usize, j: usize| -> f64 {
        let b = pair.kp_b.coords[j];
        ((proj[i][0] - b[0] as f64).powi(2) + (proj[i][1] - b[1] as f64).powi(2)).sqrt()
    };
    let nn_a: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (j, dist(i, j)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
        })
        .collect();
    let nn_b: Vec<(usize, f64)> = (0..m)
        .map(|j| {
            (0..n)
                .map(|i| (i, dist(i, j)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
        })
        .collect();

    let mut gt = GroundTruth::default();
    let mut a_matched = vec![false; n];
    let mut b_matched = vec![false; m];
    for i in 0..n {
        let (j, d) = nn_a[i];
        if d < eps_match && nn_b[j].0 == i {
            gt.matches.push((i, j));
            a_matched[i] = true;
            b_matched[j] = true;
        }
    }
    for i in 0..n {
        if a_matched[i] {
            continue;
        }
        if nn_a[i].1 > eps_nonmatch {
            gt.unmatched_a.push(i);
        } else {
            gt.undecided_a.push(i);
        }
    }
    for j in 0..m {
        if b_matched[j] {
            continue;
        }
        if nn_b[j].1 > eps_nonmatch {
            gt.unmatched_b.push(j);
        } else {
            gt.undecided_b.push(j);
        }
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DescriptorModel {
        DescriptorModel::new(16, 0.3, 7)
    }

    #[test]
    fn clean_pair_has_full_correspondence() {
        let pair = generate_pair(1, 32, 0.0, 0.0, &model()).unwrap();
        assert_eq!(pair.inliers.len(), 32);
        let gt = label_ground_truth(&pair, 3.0, 5.0).unwrap();
        assert_eq!(gt.matches.len(), 32);
        assert!(gt.unmatched_a.is_empty());
        assert!(gt.unmatched_b.is_empty());
        let mut sorted = gt.matches.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, pair.inliers);
    }

    #[test]
    fn all_outliers_no_matches() {
        let pair = generate_pair(2, 24, 0.0, 1.0, &model()).unwrap();
        assert!(pair.inliers.is_empty());
        let gt = label_ground_truth(&pair, 3.0, 5.0).unwrap();
        assert!(gt.matches.len() <= 1, "accidental near-matches should be rare");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_pair(3, 16, 1.0, 0.25, &model()).unwrap();
        let b = generate_pair(3, 16, 1.0, 0.25, &model()).unwrap();
        assert_eq!(a.kp_a, b.kp_a);
        assert_eq!(a.kp_b, b.kp_b);
        assert_eq!(a.inliers, b.inliers);
        let c = generate_pair(4, 16, 1.0, 0.25, &model()).unwrap();
        assert_ne!(a.kp_a, c.kp_a);
    }

    #[test]
    fn mixed_pair_recovers_constructed_inliers() {
        let pair = generate_pair(5, 48, 1.0, 0.25, &model()).unwrap();
        let gt = label_ground_truth(&pair, 3.0, 5.0).unwrap();
        // every constructed inlier with small noise must be labeled a match
        let set: std::collections::BTreeSet<(usize, usize)> = gt.matches.iter().copied().collect();
        let mut found = 0;
        for &(i, j) in &pair.inliers {
            if set.contains(&(i, j)) {
                found += 1;
            }
        }
        assert!(
            found >= pair.inliers.len() - 2,
            "found {found} of {}",
            pair.inliers.len()
        );
        // and labeled matches only come from constructed inliers or chance
        // collisions closer than the threshold
        for &(i, j) in &gt.matches {
            let d = {
                let p = pair.transform.apply([
                    pair.kp_a.coords[i][0] as f64,
                    pair.kp_a.coords[i][1] as f64,
                ]);
                let b = pair.kp_b.coords[j];
                ((p[0] - b[0] as f64).powi(2) + (p[1] - b[1] as f64).powi(2)).sqrt()
            };
            assert!(d < 3.0);
        }
    }

    #[test]
    fn keypoints_validate_against_image() {
        let pair = generate_pair(6, 40, 2.0, 0.3, &model()).unwrap();
        pair.kp_a.validate(pair.image_size).unwrap();
        pair.kp_b.validate(pair.image_size).unwrap();
    }

    #[test]
    fn identity_transform_identical_points_label_identity() {
        let m = model();
        let mut pair = generate_pair(7, 12, 0.0, 0.0, &m).unwrap();
        pair.transform = Homography::identity();
        pair.kp_b = pair.kp_a.clone();
        let gt = label_ground_truth(&pair, 3.0, 5.0).unwrap();
        assert_eq!(gt.matches, (0..12).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(gt.unmatched_a.is_empty() && gt.unmatched_b.is_empty());
    }

    #[test]
    fn displaced_points_are_unmatched() {
        let m = model();
        let mut pair = generate_pair(8, 10, 0.0, 0.0, &m).unwrap();
        pair.transform = Homography::identity();
        // push every b keypoint 50 px away
        for c in pair.kp_b.coords.iter_mut() {
            c[0] = (c[0] + 50.0).min(639.0);
        }
        for c in pair.kp_a.coords.iter_mut() {
            c[0] = c[0].min(560.0);
        }
        pair.kp_b.coords = pair
            .kp_a
            .coords
            .iter()
            .map(|&[x, y]| [x + 50.0, y])
            .collect();
        let gt = label_ground_truth(&pair, 3.0, 5.0).unwrap();
        assert!(gt.matches.is_empty());
        assert_eq!(gt.unmatched_a.len(), 10);
        assert_eq!(gt.unmatched_b.len(), 10);
    }

    #[test]
    fn outlier_bounds_checked() {
        assert!(generate_pair(9, 10, 0.0, 1.5, &model()).is_err());
    }
}
