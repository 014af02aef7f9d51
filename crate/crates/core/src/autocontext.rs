//! Two-stage auto-context pipeline: stage-1 probability maps are appended to
//! the appearance channels as input to a second network.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{plan_tiles, predict, VoxResNetModel};
use crate::kv::KvMap;
use crate::netspec::build_voxresnet;
use crate::train::{train, Checkpoint, IterationLog, TrainConfig};
use crate::volume::{check_extents, LabelVolume, Volume};

/// Tiling used when generating context and predicting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileParams {
    pub tile: usize,
    pub stride: usize,
}

impl TileParams {
    pub fn with_half_stride(tile: usize) -> Self {
        Self {
            tile,
            stride: (tile / 2).max(1),
        }
    }
}

fn context_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("ctx{c}")).collect()
}

/// Stage-1 probability map of one case.
pub fn context_for(model: &VoxResNetModel, input: &Volume, tiles: TileParams) -> Result<Volume> {
    let plan = plan_tiles(input.extents(), tiles.tile, tiles.stride)?;
    let probs = predict(model, input, &plan)?;
    Ok(probs.renamed(context_names(model.net.num_classes)))
}

/// Stage-1 probability maps for every case, in case order.
pub fn generate_context(stage1: &Checkpoint, cases: &[Volume], tiles: TileParams) -> Result<Vec<Volume>> {
    let model = VoxResNetModel::from_checkpoint(stage1)?;
    cases.iter().map(|c| context_for(&model, c, tiles)).collect()
}

/// Appearance channels followed by context channels.
pub fn stage2_input(appearance: &Volume, context: &Volume) -> Result<Volume> {
    check_extents(appearance.extents(), context.extents())?;
    Volume::concat(&[appearance, context])
}

/// Trains a fresh network on `appearance ++ context` inputs. Crops of the
/// combined volume share one corner, so labels, appearance and context stay aligned.
pub fn train_stage2(
    cases: &[(Volume, LabelVolume)],
    contexts: &[Volume],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<IterationLog>)> {
    if contexts.len() != cases.len() {
        return Err(Error::invalid(format!(
            "{} context maps for {} training cases",
            contexts.len(),
            cases.len()
        )));
    }
    let dataset: Vec<(Volume, LabelVolume)> = cases
        .iter()
        .zip(contexts)
        .map(|((v, l), c)| Ok((stage2_input(v, c)?, l.clone())))
        .collect::<Result<_>>()?;
    let channels = dataset
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one case"))?
        .0
        .channels();
    let net = build_voxresnet(channels, config.num_classes, config.width_scale)?;
    train(&net, &dataset, config)
}

/// Stage-1 prediction, concatenation, stage-2 prediction. Returns stage-2 probabilities.
pub fn predict_autocontext(
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    input: &Volume,
    tiles: TileParams,
) -> Result<Volume> {
    let m1 = VoxResNetModel::from_checkpoint(stage1)?;
    let m2 = VoxResNetModel::from_checkpoint(stage2)?;
    if m2.net.num_modalities != input.channels() + m1.net.num_classes {
        return Err(Error::shape(
            "stage-2 input channels",
            input.channels() + m1.net.num_classes,
            m2.net.num_modalities,
        ));
    }
    let ctx = context_for(&m1, input, tiles)?;
    let x = stage2_input(input, &ctx)?;
    let plan = plan_tiles(x.extents(), tiles.tile, tiles.stride)?;
    predict(&m2, &x, &plan)
}

/// SHA-256 over a saved checkpoint's manifest and parameter bytes.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["manifest.txt", "params.bin"] {
        let p = dir.join(name);
        h.update(fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Records which checkpoints form a pipeline; written as `pipeline.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineManifest {
    pub stage1: String,
    pub stage1_hash: String,
    pub stage2: String,
    pub stage2_hash: String,
    pub refinements: usize,
}

impl PipelineManifest {
    pub fn to_text(&self) -> String {
        format!(
            "stage1 = {}\nstage1_hash = {}\nstage2 = {}\nstage2_hash = {}\nrefinements = {}\n",
            self.stage1, self.stage1_hash, self.stage2, self.stage2_hash, self.refinements
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvMap::read(path)?;
        Ok(Self {
            stage1: kv.require("stage1")?.to_string(),
            stage1_hash: kv.require("stage1_hash")?.to_string(),
            stage2: kv.require("stage2")?.to_string(),
            stage2_hash: kv.require("stage2_hash")?.to_string(),
            refinements: kv.parse_required("refinements")?,
        })
    }

    /// Loads both checkpoints relative to `dir`, rejecting hash mismatches.
    pub fn load(&self, dir: &Path) -> Result<(Checkpoint, Checkpoint)> {
        let mut out = Vec::with_capacity(2);
        for (rel, hash) in [(&self.stage1, &self.stage1_hash), (&self.stage2, &self.stage2_hash)] {
            let p = dir.join(rel);
            if &checkpoint_hash(&p)? != hash {
                return Err(Error::format(&p, "checkpoint hash differs from the pipeline manifest"));
            }
            out.push(Checkpoint::load(&p)?);
        }
        let s2 = out.pop().expect("two stages");
        Ok((out.pop().expect("two stages"), s2))
    }
}
