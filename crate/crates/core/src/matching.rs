//! Viewpoint retrieval: masked per-pixel correlation similarity, top-n
//! matching, greedy angular diversity and the dynamic-margin triplet loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dot, pearson_or_zero};
use crate::error::{OsopError, Result};
use crate::features::{FeatureExtractor, FeatureMap};
use crate::geometry::{geodesic_angle, Pose};
use crate::image::{ColorImage, Mask};
use crate::template_db::{match_inputs, MatchInputs, TemplateDatabase};

/// Sum over pixels foreground in both masks of the per-pixel Pearson
/// correlation; constant pixels contribute 0.
pub fn similarity(f: &FeatureMap, t: &FeatureMap, mask_f: &Mask, mask_t: &Mask) -> Result<f64> {
    let dims = (f.width(), f.height());
    if (t.width(), t.height()) != dims || mask_f.dims() != dims || mask_t.dims() != dims {
        return Err(OsopError::ResolutionMismatch(format!(
            "features {:?} / {:?}, masks {:?} / {:?}",
            dims,
            (t.width(), t.height()),
            mask_f.dims(),
            mask_t.dims()
        )));
    }
    if f.depth() != t.depth() {
        return Err(OsopError::DepthMismatch {
            expected: f.depth(),
            found: t.depth(),
        });
    }
    let mut s = 0.0;
    for v in 0..dims.1 {
        for u in 0..dims.0 {
            if *mask_f.get(u, v) && *mask_t.get(u, v) {
                s += pearson_or_zero(f.pixel(u, v), t.pixel(u, v));
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub index: [usize; 3],
    pub score: f64,
    /// Pose of the template (model → template camera).
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchJson {
    pub index: [usize; 3],
    pub score: f64,
}

pub fn matches_to_json(matches: &[MatchResult]) -> Result<String> {
    let v: Vec<MatchJson> = matches
        .iter()
        .map(|m| MatchJson {
            index: m.index,
            score: m.score,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&v)?)
}

/// Query crop prepared for matching.
pub struct PreparedQuery(pub(crate) MatchInputs);

impl PreparedQuery {
    /// `features` must come from the crop at the template resolution.
    pub fn new(features: &[FeatureMap], mask: &Mask, db: &TemplateDatabase) -> Result<Self> {
        let mi = match_inputs(features, mask, db.reduction())?;
        if mi.mask.count() == 0 {
            return Err(OsopError::EmptyMask);
        }
        Ok(Self(mi))
    }

    pub fn features(&self) -> &FeatureMap {
        &self.0.features
    }

    pub fn mask(&self) -> &Mask {
        &self.0.mask
    }
}

fn rank(mut scored: Vec<MatchResult>, n: usize) -> Vec<MatchResult> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(n);
    scored
}

/// Scores every template against a prepared query and keeps the best `n`.
pub fn match_prepared(query: &PreparedQuery, db: &TemplateDatabase, n: usize) -> Result<Vec<MatchResult>> {
    let q = &query.0;
    let d = q.features.depth();
    let scored: Vec<MatchResult> = db
        .templates()
        .par_iter()
        .map(|t| {
            if t.match_features.width() != q.features.width() || t.match_features.height() != q.features.height() {
                return Err(OsopError::ResolutionMismatch("query crop is not at template resolution".into()));
            }
            // Normalized vectors are zero outside each mask, so the plain
            // dot product sums over the mask intersection only.
            let score = q
                .normalized
                .chunks_exact(d)
                .zip(t.match_normalized().chunks_exact(d))
                .map(|(a, b)| dot(a, b))
                .sum();
            Ok(MatchResult {
                index: t.index,
                score,
                pose: t.pose,
            })
        })
        .collect::<Result<_>>()?;
    Ok(rank(scored, n))
}

/// Top-`n` templates for a crop (resized to the template size) and its mask.
pub fn match_templates(
    crop: &ColorImage,
    mask: &Mask,
    db: &TemplateDatabase,
    extractor: &dyn FeatureExtractor,
    n: usize,
) -> Result<Vec<MatchResult>> {
    db.check_extractor(extractor.config())?;
    if mask.count() == 0 {
        return Err(OsopError::EmptyMask);
    }
    let size = db.config.template_size;
    if crop.dims() != (size, size) || mask.dims() != (size, size) {
        return Err(OsopError::ResolutionMismatch(format!(
            "crop {:?} must be {size}x{size}",
            crop.dims()
        )));
    }
    let features = extractor.extract(crop)?;
    match_prepared(&PreparedQuery::new(&features, mask, db)?, db, n)
}

/// Greedy scan in score order dropping matches within `angle_thresh` degrees
/// of an already kept one.
pub fn diversity_filter(matches: &[MatchResult], angle_thresh: f64, keep: usize) -> Vec<MatchResult> {
    let mut out: Vec<MatchResult> = Vec::new();
    for m in matches {
        if out.len() >= keep {
            break;
        }
        let close = out
            .iter()
            .any(|k| geodesic_angle(&k.pose.rotation, &m.pose.rotation) < angle_thresh);
        if !close {
            out.push(m.clone());
        }
    }
    out
}

/// max(0, 1 − sim_pos / (sim_neg + m)), `m` in radians.
pub fn triplet_loss(sim_pos: f64, sim_neg: f64, margin: f64) -> Result<f64> {
    let den = sim_neg + margin;
    if den.abs() < 1e-9 {
        return Err(OsopError::DegenerateDenominator);
    }
    Ok((1.0 - sim_pos / den).max(0.0))
}

/// Subgradient of [`triplet_loss`] with respect to (sim_pos, sim_neg); zero
/// on the clamped side.
pub fn triplet_loss_grad(sim_pos: f64, sim_neg: f64, margin: f64) -> Result<(f64, f64)> {
    let den = sim_neg + margin;
    if den.abs() < 1e-9 {
        return Err(OsopError::DegenerateDenominator);
    }
    if 1.0 - sim_pos / den <= 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((-1.0 / den, sim_pos / (den * den)))
}

/// Puller views are within this angle of the anchor (degrees).
pub const PULLER_MAX_DEG: f64 = 10.0;
/// Pusher views are at least this far from the anchor (degrees).
pub const PUSHER_MIN_DEG: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletRole {
    Puller,
    Pusher,
}

/// Role of a candidate view relative to the anchor, or `None` if it is in
/// the ambiguous band.
pub fn triplet_role(angle_deg: f64) -> Option<TripletRole> {
    if angle_deg <= PULLER_MAX_DEG {
        Some(TripletRole::Puller)
    } else if angle_deg >= PUSHER_MIN_DEG {
        Some(TripletRole::Pusher)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::image::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, d: usize, rng: &mut impl Rng) -> FeatureMap {
        FeatureMap::new(3, w, h, d, (0..w * h * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    }

    #[test]
    fn self_similarity_counts_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(5, 4, 6, &mut rng);
        let all = Grid::filled(5, 4, true);
        assert!((similarity(&f, &f, &all, &all).unwrap() - 20.0).abs() < 1e-12);
        let left = Grid::from_fn(5, 4, |u, _| u < 2);
        let right = Grid::from_fn(5, 4, |u, _| u >= 2);
        assert_eq!(similarity(&f, &f, &left, &right).unwrap(), 0.0);
        let small = Grid::filled(4, 4, true);
        assert!(matches!(similarity(&f, &f, &small, &all), Err(OsopError::ResolutionMismatch(_))));
    }

    #[test]
    fn similarity_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random_map(6, 5, 8, &mut rng);
            let t = random_map(6, 5, 8, &mut rng);
            let mf = Grid::from_fn(6, 5, |_, _| rng.random_bool(0.7));
            let mt = Grid::from_fn(6, 5, |_, _| rng.random_bool(0.7));
            let mut want = 0.0;
            for v in 0..5 {
                for u in 0..6 {
                    if *mf.get(u, v) && *mt.get(u, v) {
                        want += naive_corr(f.pixel(u, v), t.pixel(u, v));
                    }
                }
            }
            assert!((similarity(&f, &t, &mf, &mt).unwrap() - want).abs() < 1e-10);
            assert!((similarity(&t, &f, &mt, &mf).unwrap() - want).abs() < 1e-10);
        }
    }

    fn matches_with_rotations(rots: &[Rotation]) -> Vec<MatchResult> {
        rots.iter()
            .enumerate()
            .map(|(i, r)| MatchResult {
                index: [i, 0, 0],
                score: (rots.len() - i) as f64,
                pose: Pose::from_rotation(*r),
            })
            .collect()
    }

    #[test]
    fn diversity_filter_examples() {
        let r = Rotation::rot_z(0.3);
        let m = matches_with_rotations(&[r, r, Rotation::rot_x(1.0)]);
        let out = diversity_filter(&m, 15.0, 25);
        assert_eq!(out.iter().map(|x| x.index[0]).collect::<Vec<_>>(), vec![0, 2]);
        let out = diversity_filter(&m, 0.0, 2);
        assert_eq!(out, m[..2].to_vec());
    }

    #[test]
    fn triplet_examples_and_gradient() {
        assert_eq!(triplet_loss(2.0, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(1.0, 1.0, 1.0).unwrap(), 0.5);
        assert!(matches!(triplet_loss(1.0, -1.0, 1.0), Err(OsopError::DegenerateDenominator)));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 50 {
            let (p, n, m) = (rng.random_range(-5.0..5.0), rng.random_range(0.5..5.0), rng.random_range(0.0..3.0));
            let l = triplet_loss(p, n, m).unwrap();
            if l < 1e-3 {
                continue;
            }
            let (gp, gn) = triplet_loss_grad(p, n, m).unwrap();
            let h = 1e-6;
            let fp = (triplet_loss(p + h, n, m).unwrap() - triplet_loss(p - h, n, m).unwrap()) / (2.0 * h);
            let fnn = (triplet_loss(p, n + h, m).unwrap() - triplet_loss(p, n - h, m).unwrap()) / (2.0 * h);
            assert!((fp - gp).abs() <= 1e-5 * gp.abs().max(1e-8));
            assert!((fnn - gn).abs() <= 1e-5 * gn.abs().max(1e-8));
            checked += 1;
        }
    }

    #[test]
    fn triplet_roles() {
        assert_eq!(triplet_role(5.0), Some(TripletRole::Puller));
        assert_eq!(triplet_role(30.0), None);
        assert_eq!(triplet_role(90.0), Some(TripletRole::Pusher));
    }

    #[test]
    fn match_json_shape() {
        let m = matches_with_rotations(&[Rotation::identity()]);
        let j: serde_json::Value = serde_json::from_str(&matches_to_json(&m).unwrap()).unwrap();
        assert_eq!(j[0]["index"], serde_json::json!([0, 0, 0]));
        assert_eq!(j[0]["score"], serde_json::json!(1.0));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn similarity_is_affine_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_map(4, 3, 5, &mut rng);
            let t = random_map(4, 3, 5, &mut rng);
            let mask = Grid::from_fn(4, 3, |_, _| rng.random_bool(0.8));
            let mut data = Vec::new();
            for px in f.pixels() {
                let (a, b) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
                data.extend(px.iter().map(|x| a * x + b));
            }
            let g = FeatureMap::new(3, 4, 3, 5, data);
            let s1 = similarity(&f, &t, &mask, &mask).unwrap();
            let s2 = similarity(&g, &t, &mask, &mask).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-10);
        }

        #[test]
        fn diversity_output_is_spread_subsequence(seed in any::<u64>(), thresh in 0.0f64..60.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rots: Vec<Rotation> = (0..30).map(|_| Rotation::random(&mut rng)).collect();
            let m = matches_with_rotations(&rots);
            let out = diversity_filter(&m, thresh, 10);
            prop_assert!(out.len() <= 10);
            let mut pos = 0;
            for o in &out {
                let at = m[pos..].iter().position(|x| x.index == o.index);
                prop_assert!(at.is_some());
                pos += at.unwrap() + 1;
            }
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    prop_assert!(geodesic_angle(&out[i].pose.rotation, &out[j].pose.rotation) >= thresh);
                }
            }
        }
    }
}
