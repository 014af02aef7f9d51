//! Training loop: random sub-volume sampling, SGD with momentum, checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{GradStore, Graph};
use crate::error::{Error, Result};
use crate::kernels::{Mode, RunningStats, BN_MOMENTUM};
use crate::kv::{join, KvMap};
use crate::loss::{total_loss, LossConfig};
use crate::netspec::{build_voxresnet, register_params, NetworkSpec, Params};
use crate::tensor::{Real, Tensor};
use crate::volume::{check_extents, LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Fractions of `max_iterations` at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    pub width_scale: f64,
    pub num_classes: usize,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_iterations(10_000)
    }
}

const CONFIG_KEYS: &[&str] = &[
    "crop_size",
    "batch_size",
    "max_iterations",
    "learning_rate",
    "lr_decay_at",
    "lr_decay_factor",
    "momentum",
    "seed",
    "width_scale",
    "num_classes",
    "checkpoint_every",
    "lambda",
    "aux_weight_init",
    "aux_floor",
    "aux_decay",
    "decay_interval",
];

impl TrainConfig {
    pub fn for_iterations(max_iterations: usize) -> Self {
        Self {
            crop_size: 80,
            batch_size: 1,
            max_iterations,
            learning_rate: 1e-2,
            lr_decay_at: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            seed: 0,
            width_scale: 1.0,
            num_classes: 4,
            checkpoint_every: 0,
            loss: LossConfig::for_iterations(max_iterations),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 8 {
            return Err(Error::invalid(format!("crop_size {} is below 8", self.crop_size)));
        }
        if self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::invalid("batch_size and max_iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor must lie in (0, 1]"));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("lr_decay_at fractions must lie in [0, 1]"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        self.loss.validate()
    }

    /// Learning rate used at (0-based) `iteration`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let drops = self
            .lr_decay_at
            .iter()
            .filter(|&&f| iteration >= (f * self.max_iterations as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_decay_factor.powi(drops as i32)
    }

    /// Reads keys over the defaults; `decay_interval` defaults to an eighth of the run.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::format(map.origin(), format!("unknown config key `{k}`")));
        }
        let max_iterations = map.get("max_iterations")?.unwrap_or(10_000);
        let mut c = Self::for_iterations(max_iterations);
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = map.get($key)? {
                    $field = v;
                }
            };
        }
        set!(c.crop_size, "crop_size");
        set!(c.batch_size, "batch_size");
        set!(c.learning_rate, "learning_rate");
        set!(c.lr_decay_factor, "lr_decay_factor");
        set!(c.momentum, "momentum");
        set!(c.seed, "seed");
        set!(c.width_scale, "width_scale");
        set!(c.num_classes, "num_classes");
        set!(c.checkpoint_every, "checkpoint_every");
        set!(c.loss.lambda, "lambda");
        set!(c.loss.aux_weight_init, "aux_weight_init");
        set!(c.loss.aux_floor, "aux_floor");
        set!(c.loss.aux_decay, "aux_decay");
        set!(c.loss.decay_interval, "decay_interval");
        if map.raw("lr_decay_at").is_some() {
            c.lr_decay_at = map.list("lr_decay_at")?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::read(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "crop_size = {}\nbatch_size = {}\nmax_iterations = {}\nlearning_rate = {}\nlr_decay_at = {}\n\
             lr_decay_factor = {}\nmomentum = {}\nseed = {}\nwidth_scale = {}\nnum_classes = {}\n\
             checkpoint_every = {}\nlambda = {}\naux_weight_init = {}\naux_floor = {}\naux_decay = {}\n\
             decay_interval = {}\n",
            self.crop_size,
            self.batch_size,
            self.max_iterations,
            self.learning_rate,
            join(&self.lr_decay_at),
            self.lr_decay_factor,
            self.momentum,
            self.seed,
            self.width_scale,
            self.num_classes,
            self.checkpoint_every,
            self.loss.lambda,
            self.loss.aux_weight_init,
            self.loss.aux_floor,
            self.loss.aux_decay,
            self.loss.decay_interval,
        )
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_text().as_bytes()))
    }
}

/// Draws a `crop`-sized box with a uniform corner. Axes shorter than the crop
/// are reflect-padded on the high side, so their corner is always 0.
pub fn sample_subvolume<R: Rng + ?Sized>(
    volume: &Volume,
    labels: &LabelVolume,
    crop: [usize; 3],
    rng: &mut R,
) -> Result<(Tensor<f32>, LabelVolume)> {
    check_extents(volume.extents(), labels.extents())?;
    if crop.contains(&0) {
        return Err(Error::invalid("crop extents must be >= 1"));
    }
    let ext = volume.extents();
    let mut corner = [0usize; 3];
    for axis in 0..3 {
        let padded = ext[axis].max(crop[axis]);
        corner[axis] = rng.random_range(0..=padded - crop[axis]);
    }
    Ok((
        volume.crop_reflect(corner, crop).to_tensor(),
        labels.crop_reflect(corner, crop),
    ))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `v ← μ·v − lr·g`, `W ← W + v`. Nothing is modified if any gradient is non-finite.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &GradStore<T>,
    lr: f64,
    momentum: f64,
    state: &mut SgdState<T>,
    names: &[String],
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::shape("velocity tensors", params.len(), state.velocity.len()));
    }
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("param {i}"));
    for (i, p) in params.iter().enumerate() {
        let g = grads
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no gradient for {}", name(i))))?;
        p.expect_same_shape(g)?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", name(i))));
        }
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(momentum);
    for (i, (p, v)) in params.iter_mut().zip(state.velocity.iter_mut()).enumerate() {
        let g = grads.get(i).expect("checked above");
        for ((w, vel), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mu * *vel - lr * gv;
            *w += *vel;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: f64,
    pub aux_weight: f64,
    pub learning_rate: f64,
}

impl fmt::Display for IterationLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6e} {:.6e}",
            self.iteration, self.loss, self.aux_weight, self.learning_rate
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Saved model: network identity, parameters, BN statistics and (optionally)
/// the optimizer and sampler state needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub num_modalities: usize,
    pub num_classes: usize,
    pub width_scale: f64,
    pub schedule_hash: String,
    pub iteration: usize,
    pub params: Params<f32>,
    pub velocity: Option<Vec<Tensor<f32>>>,
    pub config: Option<TrainConfig>,
    pub rng: Option<RngState>,
}

fn write_f32s(path: &Path, tensors: &[Tensor<f32>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensors.iter().map(Tensor::len).sum::<usize>() * 4);
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_f32s(path: &Path, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expected = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    shapes
        .iter()
        .map(|s| Tensor::new(s.clone(), values.by_ref().take(s.iter().product()).collect()))
        .collect()
}

fn floats(v: &[f32]) -> String {
    if v.is_empty() {
        "empty".to_string()
    } else {
        join(v)
    }
}

impl Checkpoint {
    /// Fresh, untrained checkpoint for `net`.
    pub fn from_params(net: &NetworkSpec, params: Params<f32>) -> Result<Self> {
        params.check_layout(&net.layout)?;
        Ok(Self {
            num_modalities: net.num_modalities,
            num_classes: net.num_classes,
            width_scale: net.width_scale,
            schedule_hash: net.schedule_hash(),
            iteration: 0,
            params,
            velocity: None,
            config: None,
            rng: None,
        })
    }

    /// Rebuilds the network and checks that its schedule matches the saved hash.
    pub fn network(&self) -> Result<NetworkSpec> {
        let net = build_voxresnet(self.num_modalities, self.num_classes, self.width_scale)?;
        if net.schedule_hash() != self.schedule_hash {
            return Err(Error::invalid("checkpoint was written for a different layer schedule"));
        }
        self.params.check_layout(&net.layout)?;
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let net = self.network()?;
        let mut m = String::from("format = voxresnet-checkpoint-1\n");
        m += &format!("num_modalities = {}\n", self.num_modalities);
        m += &format!("num_classes = {}\n", self.num_classes);
        m += &format!("width_scale = {}\n", self.width_scale);
        m += &format!("schedule_hash = {}\n", self.schedule_hash);
        m += &format!("iteration = {}\n", self.iteration);
        m += &format!("param_count = {}\n", self.params.tensors.len());
        for (i, info) in net.layout.params.iter().enumerate() {
            m += &format!("param.{i} = {} {}\n", info.name, join(&info.shape));
        }
        m += &format!("bn_count = {}\n", self.params.bn_stats.len());
        for (i, s) in self.params.bn_stats.iter().enumerate() {
            m += &format!("bn.{i}.mean = {}\nbn.{i}.var = {}\n", floats(&s.mean), floats(&s.var));
        }
        m += &format!("has_velocity = {}\n", self.velocity.is_some());
        if let Some(cfg) = &self.config {
            m += &format!("config_hash = {}\n", cfg.hash());
            fs::write(dir.join("config.txt"), cfg.to_kv_text())
                .map_err(|e| Error::io(format!("writing config in {}", dir.display()), e))?;
        }
        if let Some(r) = &self.rng {
            m += &format!(
                "rng_seed = {}\nrng_stream = {}\nrng_word_pos = {}\n",
                hex::encode(r.seed),
                r.stream,
                r.word_pos
            );
        }
        write_f32s(&dir.join("params.bin"), &self.params.tensors)?;
        if let Some(v) = &self.velocity {
            write_f32s(&dir.join("velocity.bin"), v)?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, m).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.txt");
        let kv = KvMap::read(&manifest)?;
        if kv.require("format")? != "voxresnet-checkpoint-1" {
            return Err(Error::format(&manifest, "unsupported checkpoint format"));
        }
        let num_modalities = kv.parse_required("num_modalities")?;
        let num_classes = kv.parse_required("num_classes")?;
        let width_scale = kv.parse_required("width_scale")?;
        let net = build_voxresnet(num_modalities, num_classes, width_scale)?;
        let schedule_hash = kv.require("schedule_hash")?.to_string();
        if schedule_hash != net.schedule_hash() {
            return Err(Error::format(&manifest, "schedule hash does not match the rebuilt network"));
        }
        let count: usize = kv.parse_required("param_count")?;
        if count != net.layout.params.len() {
            return Err(Error::shape("checkpoint parameters", net.layout.params.len(), count));
        }
        let shapes: Vec<Vec<usize>> = net.layout.params.iter().map(|p| p.shape.clone()).collect();
        for (i, info) in net.layout.params.iter().enumerate() {
            let line = kv.require(&format!("param.{i}"))?;
            if line != format!("{} {}", info.name, join(&info.shape)) {
                return Err(Error::format(&manifest, format!("param.{i} = `{line}` does not match {}", info.name)));
            }
        }
        let tensors = read_f32s(&dir.join("params.bin"), &shapes)?;
        let bn_count: usize = kv.parse_required("bn_count")?;
        if bn_count != net.layout.bn.len() {
            return Err(Error::shape("checkpoint batchnorm layers", net.layout.bn.len(), bn_count));
        }
        let mut bn_stats = Vec::with_capacity(bn_count);
        for i in 0..bn_count {
            let key_mean = format!("bn.{i}.mean");
            if kv.require(&key_mean)? == "empty" {
                bn_stats.push(RunningStats::empty());
                continue;
            }
            bn_stats.push(RunningStats {
                mean: kv.list(&key_mean)?,
                var: kv.list(&format!("bn.{i}.var"))?,
            });
        }
        let velocity = if kv.parse_required::<bool>("has_velocity")? {
            Some(read_f32s(&dir.join("velocity.bin"), &shapes)?)
        } else {
            None
        };
        let config = match kv.raw("config_hash") {
            Some(h) => {
                let cfg = TrainConfig::read(&dir.join("config.txt"))?;
                if cfg.hash() != h {
                    return Err(Error::format(&manifest, "config hash does not match config.txt"));
                }
                Some(cfg)
            }
            None => None,
        };
        let rng = match kv.raw("rng_seed") {
            Some(s) => {
                let bytes = hex::decode(s).map_err(|_| Error::format(&manifest, "rng_seed is not hex"))?;
                let seed: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| Error::format(&manifest, "rng_seed must be 32 bytes"))?;
                Some(RngState {
                    seed,
                    stream: kv.parse_required("rng_stream")?,
                    word_pos: kv.parse_required("rng_word_pos")?,
                })
            }
            None => None,
        };
        let params = Params { tensors, bn_stats };
        params.check_layout(&net.layout)?;
        Ok(Self {
            num_modalities,
            num_classes,
            width_scale,
            schedule_hash,
            iteration: kv.parse_required("iteration")?,
            params,
            velocity,
            config,
            rng,
        })
    }
}

/// Resumable training state over a borrowed dataset.
pub struct Trainer<'a> {
    net: &'a NetworkSpec,
    dataset: &'a [(Volume, LabelVolume)],
    config: TrainConfig,
    params: Params<f32>,
    sgd: SgdState<f32>,
    rng: ChaCha8Rng,
    iteration: usize,
    names: Vec<String>,
}

fn check_dataset(net: &NetworkSpec, dataset: &[(Volume, LabelVolume)]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one case"));
    }
    for (v, l) in dataset {
        if v.channels() != net.num_modalities {
            return Err(Error::shape("input channels", net.num_modalities, v.channels()));
        }
        check_extents(v.extents(), l.extents())?;
        if l.num_classes() > net.num_classes {
            return Err(Error::invalid(format!(
                "labels use {} classes but the network predicts {}",
                l.num_classes(),
                net.num_classes
            )));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a NetworkSpec, dataset: &'a [(Volume, LabelVolume)], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_dataset(net, dataset)?;
        let params = Params::init(&net.layout, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            net,
            dataset,
            sgd: SgdState::new(&params.tensors),
            params,
            rng,
            iteration: 0,
            names: net.layout.params.iter().map(|p| p.name.clone()).collect(),
            config,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`] under the same config.
    pub fn resume(
        net: &'a NetworkSpec,
        dataset: &'a [(Volume, LabelVolume)],
        config: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(net, dataset, config)?;
        if ckpt.schedule_hash != net.schedule_hash() {
            return Err(Error::invalid("checkpoint was written for a different network"));
        }
        match &ckpt.config {
            Some(c) if c.hash() == t.config.hash() => {}
            _ => return Err(Error::invalid("checkpoint config does not match the training config")),
        }
        ckpt.params.check_layout(&net.layout)?;
        t.params = ckpt.params.clone();
        t.sgd = SgdState {
            velocity: ckpt
                .velocity
                .clone()
                .ok_or_else(|| Error::invalid("checkpoint carries no optimizer state"))?,
        };
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint carries no sampler state"))?
            .restore();
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.max_iterations
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One sample → forward → loss → backward → update cycle.
    pub fn step(&mut self) -> Result<IterationLog> {
        let it = self.iteration;
        let crop = [self.config.crop_size; 3];
        let mut inputs = Vec::with_capacity(self.config.batch_size);
        let mut labels = Vec::new();
        for _ in 0..self.config.batch_size {
            let case = self.rng.random_range(0..self.dataset.len());
            let (v, l) = &self.dataset[case];
            let (x, y) = sample_subvolume(v, l, crop, &mut self.rng)?;
            inputs.push(x);
            labels.extend_from_slice(y.data());
        }
        let n = inputs.len();
        let mut shape = inputs[0].shape().to_vec();
        shape[0] = n;
        let x = Tensor::new(shape, inputs.into_iter().flat_map(Tensor::into_data).collect())?;

        let mut graph = Graph::new();
        let nodes = register_params(&mut graph, &self.params)?;
        let input = graph.input(x);
        let pass = self
            .net
            .forward_graph(&mut graph, &nodes, &self.params.bn_stats, input, Mode::Train)?;
        let labels: Arc<[u8]> = labels.into();
        let terms = total_loss(&mut graph, &pass, labels, &nodes, &self.net.layout, &self.config.loss, it)?;
        let loss = graph.value(terms.total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        let grads = graph.backward(terms.total)?;
        let lr = self.config.learning_rate_at(it);
        sgd_step(
            &mut self.params.tensors,
            &grads,
            lr,
            self.config.momentum,
            &mut self.sgd,
            &self.names,
        )?;
        self.params
            .update_running_stats(&pass.batch_stats, BN_MOMENTUM as f32);
        self.iteration += 1;
        Ok(IterationLog {
            iteration: it,
            loss,
            aux_weight: terms.aux_weight,
            learning_rate: lr,
        })
    }

    /// Steps until `max_iterations`, calling `on_iter` after every step.
    pub fn run(&mut self, mut on_iter: impl FnMut(&IterationLog, &Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.step()?;
            on_iter(&log, self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            num_modalities: self.net.num_modalities,
            num_classes: self.net.num_classes,
            width_scale: self.net.width_scale,
            schedule_hash: self.net.schedule_hash(),
            iteration: self.iteration,
            params: self.params.clone(),
            velocity: Some(self.sgd.velocity.clone()),
            config: Some(self.config.clone()),
            rng: Some(RngState::capture(&self.rng)),
        }
    }
}

/// Trains from scratch; returns the final checkpoint and the per-iteration log.
pub fn train(
    net: &NetworkSpec,
    dataset: &[(Volume, LabelVolume)],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<IterationLog>)> {
    let mut trainer = Trainer::new(net, dataset, config.clone())?;
    let mut logs = Vec::with_capacity(config.max_iterations);
    trainer.run(|log, _| {
        logs.push(*log);
        Ok(())
    })?;
    Ok((trainer.checkpoint(), logs))
}
