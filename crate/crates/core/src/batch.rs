//! Network inputs: intensity normalisation, cropping and paired augmentation
//! of half-way resampled pairs, packed into training batches of nested quads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_flip_pair, draw_flip, tps_warp_pair, TpsWarp};
use crate::error::{Error, Result};
use crate::sampler::{NestedQuad, ScanPair, Variant};
use crate::store::PairSource;
use crate::volume::{centered_origin, crop, normalize_intensity, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub crop: [usize; 3],
    /// Maximum random offset of the crop box from the centre, per axis.
    pub crop_jitter: usize,
    pub flip: bool,
    pub tps_points: usize,
    /// Standard deviation of TPS control displacements (mm); 0 disables TPS.
    pub tps_sd_mm: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop: [24, 32, 24],
            crop_jitter: 2,
            flip: true,
            tps_points: 10,
            tps_sd_mm: 1.0,
        }
    }
}

/// Augmentation actually applied to one pair, recorded for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop_origin: [usize; 3],
    pub flip: Option<usize>,
    pub tps: Option<TpsWarp>,
}

impl AugmentRecord {
    /// Centred crop, nothing else: the evaluation-time transform.
    pub fn centered(dims: [usize; 3], crop_size: [usize; 3]) -> Result<Self> {
        Ok(Self {
            crop_origin: centered_origin(dims, crop_size)?,
            flip: None,
            tps: None,
        })
    }
}

/// Draws the augmentation for one pair whose half-way volumes have `dims`.
pub fn draw_augmentation<R: Rng + ?Sized>(
    (dims, spacing): ([usize; 3], [f64; 3]),
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentRecord> {
    let mut rec = AugmentRecord::centered(dims, cfg.crop)?;
    if !cfg.enabled {
        return Ok(rec);
    }
    for a in 0..3 {
        let room_lo = rec.crop_origin[a].min(cfg.crop_jitter);
        let room_hi = (dims[a] - cfg.crop[a] - rec.crop_origin[a]).min(cfg.crop_jitter);
        let off = rng.random_range(-(room_lo as i64)..=room_hi as i64);
        rec.crop_origin[a] = (rec.crop_origin[a] as i64 + off) as usize;
    }
    if cfg.flip {
        rec.flip = draw_flip(rng);
    }
    if cfg.tps_sd_mm > 0.0 && cfg.tps_points > 0 {
        let template = Volume3D::zeros(cfg.crop, spacing)?;
        rec.tps = Some(TpsWarp::random(&template, cfg.tps_points, cfg.tps_sd_mm, rng)?);
    }
    Ok(rec)
}

/// Normalise each half-way volume on its full grid, crop, flip, then warp.
/// The same crop, flip and warp apply to both volumes.
pub fn prepare_pair(
    v0: &Volume3D,
    v1: &Volume3D,
    crop_size: [usize; 3],
    rec: &AugmentRecord,
) -> Result<(Volume3D, Volume3D)> {
    v0.check_same_dims(v1)?;
    let n0 = normalize_intensity(v0)?;
    let n1 = normalize_intensity(v1)?;
    let c0 = crop(&n0, rec.crop_origin, crop_size)?;
    let c1 = crop(&n1, rec.crop_origin, crop_size)?;
    let (f0, f1) = apply_flip_pair(&c0, &c1, rec.flip)?;
    match &rec.tps {
        Some(w) => tps_warp_pair(&f0, &f1, w),
        None => Ok((f0, f1)),
    }
}

/// Evaluation input for one pair: half-way resampled, normalised, centred crop.
pub fn eval_input<S: PairSource + ?Sized>(
    store: &S,
    pair: &ScanPair,
    crop_size: [usize; 3],
) -> Result<(Volume3D, Volume3D)> {
    let (h0, h1) = store.halfway(pair)?;
    let rec = AugmentRecord::centered(h0.dims(), crop_size)?;
    prepare_pair(&h0, &h1, crop_size, &rec)
}

/// Interleaves two volumes as a 2-channel sample, channel 0 = slot 0.
pub fn pack_pair(v0: &Volume3D, v1: &Volume3D, out: &mut Vec<f32>) {
    out.extend_from_slice(v0.data());
    out.extend_from_slice(v1.data());
}

/// One quad's pairs and what was done to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSample {
    pub quad: NestedQuad,
    pub augment: [AugmentRecord; 2],
}

#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub samples: Vec<QuadSample>,
    /// `[2 * n_quads, 2, nz, ny, nx]` in C order (x fastest); rows alternate
    /// pair1, pair2 of each quad.
    pub data: Vec<f32>,
    pub crop: [usize; 3],
    pub sto_labels: Vec<u8>,
    pub categories: Vec<usize>,
}

impl TrainingBatch {
    pub fn n_quads(&self) -> usize {
        self.samples.len()
    }

    pub fn sample_len(&self) -> usize {
        2 * self.crop.iter().product::<usize>()
    }
}

/// Picks a variant per pair, draws independent augmentations for the two
/// pairs of each quad and renders the batch.
pub fn assemble_training_batch<S: PairSource + Sync + ?Sized, R: Rng + ?Sized>(
    quads: &[NestedQuad],
    store: &S,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if quads.is_empty() {
        return Err(Error::MissingData("empty quad list for batch".into()));
    }
    // Random choices are drawn serially so the batch does not depend on the
    // thread count; rendering runs in parallel.
    let mut plan = Vec::with_capacity(quads.len());
    for q in quads {
        let mut q = q.clone();
        q.pair1.variant = Variant::random(rng);
        q.pair2.variant = Variant::random(rng);
        let a1 = draw_augmentation(store.grid(&q.pair1)?, cfg, rng)?;
        let a2 = draw_augmentation(store.grid(&q.pair2)?, cfg, rng)?;
        plan.push(QuadSample {
            quad: q,
            augment: [a1, a2],
        });
    }
    let rendered: Vec<Vec<f32>> = plan
        .par_iter()
        .map(|s| -> Result<Vec<f32>> {
            let mut buf = Vec::new();
            for (pair, aug) in [(&s.quad.pair1, &s.augment[0]), (&s.quad.pair2, &s.augment[1])] {
                let (h0, h1) = store.halfway(pair)?;
                let (p0, p1) = prepare_pair(&h0, &h1, cfg.crop, aug)?;
                pack_pair(&p0, &p1, &mut buf);
            }
            Ok(buf)
        })
        .collect::<Result<_>>()?;
    let mut sto_labels = Vec::with_capacity(2 * plan.len());
    let mut categories = Vec::with_capacity(plan.len());
    for s in &plan {
        sto_labels.push(s.quad.pair1.sto_label);
        sto_labels.push(s.quad.pair2.sto_label);
        categories.push(s.quad.category);
    }
    Ok(TrainingBatch {
        data: rendered.concat(),
        samples: plan,
        crop: cfg.crop,
        sto_labels,
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3], scale: f32) -> Volume3D {
        Volume3D::from_fn(dims, [1.0; 3], |i, j, k| {
            scale * (i as f32 + 2.0 * j as f32 + 0.5 * (k as f32).powi(2))
        })
        .unwrap()
    }

    #[test]
    fn disabled_augmentation_is_centred_crop() {
        let cfg = AugmentationConfig {
            enabled: false,
            crop: [4, 6, 4],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = draw_augmentation(([8, 10, 8], [1.0; 3]), &cfg, &mut rng).unwrap();
        assert_eq!(
            rec,
            AugmentRecord {
                crop_origin: [2, 2, 2],
                flip: None,
                tps: None
            }
        );
    }

    #[test]
    fn crop_jitter_stays_in_bounds() {
        let cfg = AugmentationConfig {
            crop: [4, 6, 4],
            crop_jitter: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let rec = draw_augmentation(([6, 8, 10], [1.0; 3]), &cfg, &mut rng).unwrap();
            for a in 0..3 {
                assert!(rec.crop_origin[a] + cfg.crop[a] <= [6, 8, 10][a]);
            }
        }
    }

    #[test]
    fn prepared_pair_is_normalised_before_crop() {
        let a = ramp([8, 8, 8], 1.0);
        let b = ramp([8, 8, 8], 3.0);
        let rec = AugmentRecord::centered([8, 8, 8], [8, 8, 8]).unwrap();
        let (pa, pb) = prepare_pair(&a, &b, [8, 8, 8], &rec).unwrap();
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(pa.mean().abs() < 1e-5);
    }
}
