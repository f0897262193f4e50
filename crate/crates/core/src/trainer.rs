//! Alternating generator/discriminator optimization, checkpoints and inference.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Domain, FrameLoader, FrameTensor, FrameTriplet, UnpairedSampler, VideoClip};
use crate::losses::{
    discriminator_loss, external_similarity_from_embeddings, generator_adversarial_loss, internal_similarity,
    motion_degree_from_embeddings, reconstruction, scalar, total_objective, LossTerm, LossWeights, ObjectiveTerms,
    SimilarityDirections,
};
use crate::networks::{
    gather_patches, sample_locations, FrameMap, FramePredictor, ModelBundle, ModelConfig, PerceptualExtractor,
    DISCRIMINATOR_GROUP, GENERATOR_GROUP,
};
use crate::params::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Switches that remove one loss family from the generator objective.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_pcp: bool,
    pub disable_exs: bool,
    pub disable_ins: bool,
    pub disable_recycle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total_iterations: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Train on one subset only; all subsets when `None`.
    pub subset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            total_iterations: 200_000,
            checkpoint_interval: 5_000,
            seed: 0,
            ablation: Ablation::default(),
            subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }

    /// Constant for the first half of training, then linear decay towards zero.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let half = self.total_iterations / 2;
        if iteration < half {
            self.learning_rate
        } else {
            let span = (self.total_iterations - half + 1) as f64;
            self.learning_rate * (1.0 - (iteration - half) as f64 / span)
        }
    }

    fn similarity_applies(&self, source: Domain) -> bool {
        match self.weights.similarity_directions {
            SimilarityDirections::Both => true,
            SimilarityDirections::XToY => source == Domain::X,
            SimilarityDirections::YToX => source == Domain::Y,
        }
    }
}

/// Adaptive-moment optimizer over a subset of a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    prefixes: &'static [&'static str],
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(prefixes: &'static [&'static str], beta1: f64, beta2: f64) -> Self {
        Self {
            prefixes,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of the group that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in store.with_prefixes(self.prefixes) {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let g = &g;
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// Sampling positions per patch layer, one set per source domain.
pub type Locations = Vec<Vec<usize>>;

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub iteration: u64,
    /// Drives data sampling and the per-step external-similarity positions.
    pub rng: ChaCha8Rng,
    /// Exponential moving averages of the logged terms.
    pub running: BTreeMap<String, f64>,
    /// Positions used by the internal-similarity loss; fixed for the whole run.
    pub motion_locations: [Locations; 2],
}

const RUNNING_DECAY: f64 = 0.98;

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(&cfg.model, cfg.seed)?;
        let motion_locations = fixed_motion_locations(&bundle, cfg);
        Ok(Self {
            bundle,
            gen_opt: Adam::new(GENERATOR_GROUP, cfg.beta1, cfg.beta2),
            disc_opt: Adam::new(DISCRIMINATOR_GROUP, cfg.beta1, cfg.beta2),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            running: BTreeMap::new(),
            motion_locations,
        })
    }

    fn update_running(&mut self, record: &LossRecord) {
        for (k, v) in record.terms() {
            self.running
                .entry(k.to_string())
                .and_modify(|r| *r = RUNNING_DECAY * *r + (1.0 - RUNNING_DECAY) * v)
                .or_insert(v);
        }
    }
}

fn fixed_motion_locations(bundle: &ModelBundle, cfg: &TrainConfig) -> [Locations; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f83_d9ab_fb41_bd6b);
    let size = cfg.model.image_size;
    let mut pick = |d| sample_locations(&mut rng, &bundle.embedder(d).extents(size, size), cfg.weights.patches);
    let x = pick(Domain::X);
    let y = pick(Domain::Y);
    [x, y]
}

fn domain_index(d: Domain) -> usize {
    match d {
        Domain::X => 0,
        Domain::Y => 1,
    }
}

/// Per-iteration values of every loss term, as written to the history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub learning_rate: f64,
    pub adv: f64,
    pub cyc: f64,
    pub rcur: f64,
    pub rcyc: f64,
    pub exs: f64,
    pub ins: f64,
    /// Perceptual share of `cyc + rcur + rcyc` (unweighted).
    pub pcp: f64,
    pub total: f64,
    pub d_x: f64,
    pub d_y: f64,
}

impl LossRecord {
    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("adv", self.adv),
            ("cyc", self.cyc),
            ("rcur", self.rcur),
            ("rcyc", self.rcyc),
            ("exs", self.exs),
            ("ins", self.ins),
            ("pcp", self.pcp),
            ("total", self.total),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
        ]
    }

    pub fn term(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Adversarial => self.adv,
            LossTerm::Cycle => self.cyc,
            LossTerm::Recurrent => self.rcur,
            LossTerm::Recycle => self.rcyc,
            LossTerm::ExternalSimilarity => self.exs,
            LossTerm::InternalSimilarity => self.ins,
        }
    }
}

/// Output of the generator-side forward pass.
pub struct GeneratorPass {
    pub total: Tensor,
    pub terms: ObjectiveTerms,
    pub perceptual: Tensor,
    /// Perceptual share of the weighted total.
    pub perceptual_weighted: Tensor,
    /// Translations of the `x` triplet (into Y) and the `y` triplet (into X).
    pub fake_y: [Tensor; 3],
    pub fake_x: [Tensor; 3],
}

fn batched(t: &FrameTriplet) -> Result<[Tensor; 3]> {
    Ok([t.frames[0].batched()?, t.frames[1].batched()?, t.frames[2].batched()?])
}

fn add(acc: Tensor, t: Tensor) -> Result<Tensor> {
    Ok((acc + t)?)
}

/// Builds the full generator objective for both directions.
///
/// `similarity_locations` holds the per-step positions for the external
/// similarity term, indexed by source domain.
pub fn generator_pass(
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    x: &FrameTriplet,
    y: &FrameTriplet,
    similarity_locations: &[Locations; 2],
    motion_locations: &[Locations; 2],
) -> Result<GeneratorPass> {
    let reals = [batched(x)?, batched(y)?];
    let zero = Tensor::zeros((), bundle.dtype(), &Device::Cpu)?;
    let w = &cfg.weights;
    let ab = &cfg.ablation;
    let layers = &bundle.config.patch_layers;
    let pcp_layers = bundle.config.perceptual_layers.as_slice();
    let pcp = (!ab.disable_pcp).then_some((&bundle.perceptual, pcp_layers));

    let mut adv = zero.clone();
    let mut cyc = zero.clone();
    let mut rcur = zero.clone();
    let mut rcyc = zero.clone();
    let mut exs = zero.clone();
    let mut ins = zero.clone();
    // perceptual parts of cyc, rcur and rcyc
    let mut pcp_parts = [zero.clone(), zero.clone(), zero.clone()];
    let mut fakes: Vec<[Tensor; 3]> = Vec::with_capacity(2);

    for source in [Domain::X, Domain::Y] {
        let target = source.other();
        let real = &reals[domain_index(source)];
        let forward = bundle.translator(source);
        let backward = bundle.translator(target);
        let embedder = bundle.embedder(source);
        let wants_exs = !ab.disable_exs && cfg.similarity_applies(source);
        let wants_ins = !ab.disable_ins && cfg.similarity_applies(source);
        let taps_needed: &[usize] = if wants_exs || wants_ins { layers } else { &[] };

        let mut fake = Vec::with_capacity(3);
        let mut real_maps = Vec::with_capacity(3);
        for frame in real {
            let (f, taps) = forward.forward_with_taps(frame, taps_needed)?;
            fake.push(f);
            real_maps.push(taps);
        }
        let fake: [Tensor; 3] = [fake[0].clone(), fake[1].clone(), fake[2].clone()];

        let disc = bundle.discriminator(target);
        for f in &fake {
            adv = add(adv, (generator_adversarial_loss(&disc.forward(f)?, w.adversarial_mode)? / 3.0)?)?;
        }

        for (r, f) in real.iter().zip(&fake) {
            let terms = reconstruction(r, &backward.forward(f)?, pcp)?;
            if let Some(p) = &terms.perceptual {
                pcp_parts[0] = add(pcp_parts[0].clone(), (p / 3.0)?)?;
            }
            cyc = add(cyc, (terms.total()? / 3.0)?)?;
        }

        let pred = bundle.predictor(source).predict(&real[0], &real[1])?;
        let terms = reconstruction(&real[2], &pred, pcp)?;
        if let Some(p) = &terms.perceptual {
            pcp_parts[1] = add(pcp_parts[1].clone(), p.clone())?;
        }
        rcur = add(rcur, terms.total()?)?;

        if !ab.disable_recycle {
            let pred = bundle.predictor(target).predict(&fake[0], &fake[1])?;
            let terms = reconstruction(&real[2], &backward.forward(&pred)?, pcp)?;
            if let Some(p) = &terms.perceptual {
                pcp_parts[2] = add(pcp_parts[2].clone(), p.clone())?;
            }
            rcyc = add(rcyc, terms.total()?)?;
        }

        if wants_exs || wants_ins {
            let fake_maps: Vec<Vec<Tensor>> = fake.iter().map(|f| embedder.feature_maps(f)).collect::<Result<_>>()?;
            if wants_exs {
                let locs = &similarity_locations[domain_index(source)];
                for (rm, fm) in real_maps.iter().zip(&fake_maps) {
                    let rm: Vec<Tensor> = if w.detach_similarity_input {
                        rm.iter().map(Tensor::detach).collect()
                    } else {
                        rm.clone()
                    };
                    let keys = embedder.heads.project(&gather_patches(&rm, layers, locs)?)?;
                    let queries = embedder.heads.project(&gather_patches(fm, layers, locs)?)?;
                    exs = add(exs, (external_similarity_from_embeddings(&queries, &keys, w.tau)? / 3.0)?)?;
                }
            }
            if wants_ins {
                let locs = &motion_locations[domain_index(source)];
                let embed = |maps: &Vec<Tensor>| embedder.heads.project(&gather_patches(maps, layers, locs)?);
                let re: Vec<Vec<Tensor>> = real_maps.iter().map(embed).collect::<Result<_>>()?;
                let fe: Vec<Vec<Tensor>> = fake_maps.iter().map(embed).collect::<Result<_>>()?;
                let d_in = motion_degree_from_embeddings([&re[0], &re[1], &re[2]], w.tau)?;
                let d_syn = motion_degree_from_embeddings([&fe[0], &fe[1], &fe[2]], w.tau)?;
                ins = add(ins, internal_similarity(&d_in, &d_syn)?)?;
            }
        }
        fakes.push(fake);
    }

    let terms = ObjectiveTerms {
        adversarial: adv,
        cycle: cyc,
        recurrent: rcur,
        recycle: rcyc,
        external_similarity: exs,
        internal_similarity: ins,
    };
    let total = total_objective(&terms, w)?;
    let perceptual = ((&pcp_parts[0] + &pcp_parts[1])? + &pcp_parts[2])?;
    let perceptual_weighted = (((&pcp_parts[0] * w.lambda1)? + (&pcp_parts[1] * w.lambda2)?)? + (&pcp_parts[2] * w.lambda3)?)?;
    let fake_x = fakes.pop().expect("two directions");
    let fake_y = fakes.pop().expect("two directions");
    Ok(GeneratorPass {
        total,
        terms,
        perceptual,
        perceptual_weighted,
        fake_y,
        fake_x,
    })
}

fn with_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite {
            term,
            iteration: Some(iteration),
        },
        other => other,
    }
}

/// Samples this step's external-similarity positions from the state's stream.
pub fn draw_similarity_locations(state: &mut TrainState, cfg: &TrainConfig) -> [Locations; 2] {
    let size = cfg.model.image_size;
    let x = sample_locations(
        &mut state.rng,
        &state.bundle.embedder(Domain::X).extents(size, size),
        cfg.weights.patches,
    );
    let y = sample_locations(
        &mut state.rng,
        &state.bundle.embedder(Domain::Y).extents(size, size),
        cfg.weights.patches,
    );
    [x, y]
}

/// Generator, predictor and head update. Returns the pass so the
/// discriminators can reuse its translations.
pub fn generator_update(
    state: &mut TrainState,
    x: &FrameTriplet,
    y: &FrameTriplet,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<GeneratorPass> {
    let locs = draw_similarity_locations(state, cfg);
    let pass = generator_pass(&state.bundle, cfg, x, y, &locs, &state.motion_locations)
        .map_err(|e| with_iteration(e, state.iteration))?;
    let grads = pass.total.backward()?;
    state.gen_opt.step(&state.bundle.store, &grads, lr)?;
    Ok(pass)
}

/// Discriminator update on detached translations. Returns `(d_x, d_y)`.
pub fn discriminator_update(
    state: &mut TrainState,
    x: &FrameTriplet,
    y: &FrameTriplet,
    pass: &GeneratorPass,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, f64)> {
    let mode = cfg.weights.adversarial_mode;
    let mut losses = Vec::with_capacity(2);
    for (domain, real, fake) in [(Domain::X, y_or_x(x, y, Domain::X), &pass.fake_x), (Domain::Y, y_or_x(x, y, Domain::Y), &pass.fake_y)] {
        let d = state.bundle.discriminator(domain);
        let real = batched(real)?;
        let mut loss = Tensor::zeros((), state.bundle.dtype(), &Device::Cpu)?;
        for (r, f) in real.iter().zip(fake) {
            let l = discriminator_loss(&d.forward(r)?, &d.forward(&f.detach())?, mode)?;
            loss = (loss + (l / 3.0)?)?;
        }
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: if domain == Domain::X { "d_x" } else { "d_y" },
                iteration: Some(state.iteration),
            });
        }
        losses.push((loss, value));
    }
    let total = (&losses[0].0 + &losses[1].0)?;
    let grads = total.backward()?;
    state.disc_opt.step(&state.bundle.store, &grads, lr)?;
    Ok((losses[0].1, losses[1].1))
}

fn y_or_x<'a>(x: &'a FrameTriplet, y: &'a FrameTriplet, domain: Domain) -> &'a FrameTriplet {
    match domain {
        Domain::X => x,
        Domain::Y => y,
    }
}

/// One full update: generators, predictors and heads first, then both discriminators.
pub fn train_step(state: &mut TrainState, x: &FrameTriplet, y: &FrameTriplet, cfg: &TrainConfig) -> Result<LossRecord> {
    let lr = cfg.learning_rate_at(state.iteration);
    let pass = generator_update(state, x, y, cfg, lr)?;
    let (d_x, d_y) = discriminator_update(state, x, y, &pass, cfg, lr)?;
    let t = &pass.terms;
    let record = LossRecord {
        iteration: state.iteration,
        learning_rate: lr,
        adv: scalar(&t.adversarial)?,
        cyc: scalar(&t.cycle)?,
        rcur: scalar(&t.recurrent)?,
        rcyc: scalar(&t.recycle)?,
        exs: scalar(&t.external_similarity)?,
        ins: scalar(&t.internal_similarity)?,
        pcp: scalar(&pass.perceptual)?,
        total: scalar(&pass.total)?,
        d_x,
        d_y,
    };
    state.iteration += 1;
    state.update_running(&record);
    Ok(record)
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }

    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:06}.safetensors"))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint_final.safetensors")
    }
}

/// Trains from scratch for `cfg.total_iterations` steps.
pub fn train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<(TrainState, Vec<LossRecord>)> {
    let state = TrainState::new(cfg)?;
    resume(state, manifest, cfg, output)
}

/// Continues `state` until `cfg.total_iterations` steps have been taken.
pub fn resume(
    mut state: TrainState,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<(TrainState, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut history = Vec::new();
    if state.iteration >= cfg.total_iterations {
        return Ok((state, history));
    }
    let sampler = UnpairedSampler::from_manifest(manifest, cfg.subset.as_deref())?;
    let loader = FrameLoader::new(cfg.model.image_size, state.bundle.dtype(), Device::Cpu);
    let mut log = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir)?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(state.iteration > 0)
                .write(true)
                .truncate(state.iteration == 0)
                .open(out.history_path())?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    while state.iteration < cfg.total_iterations {
        let (wx, wy) = sampler.sample(&mut state.rng);
        let x = loader.load_triplet(&wx)?;
        let y = loader.load_triplet(&wy)?;
        let record = train_step(&mut state, &x, &y, cfg)?;
        if let Some(log) = log.as_mut() {
            serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
        }
        if record.iteration % 50 == 0 {
            log::info!(
                "iter {} total {:.4} cyc {:.4} d_x {:.4} d_y {:.4}",
                record.iteration,
                record.total,
                record.cyc,
                record.d_x,
                record.d_y
            );
        }
        history.push(record);
        if let Some(out) = output {
            if state.iteration % cfg.checkpoint_interval == 0 {
                if let Some(log) = log.as_mut() {
                    log.flush()?;
                }
                save_checkpoint(&state, cfg, &out.checkpoint_path(state.iteration))?;
            }
        }
    }
    if let Some(out) = output {
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        save_checkpoint(&state, cfg, &out.final_checkpoint_path())?;
    }
    Ok((state, history))
}

/// Reads a JSON-lines loss history.
pub fn read_history(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Checkpoint(format!("history line: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "x2y")]
    XToY,
    #[serde(rename = "y2x")]
    YToX,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::XToY => Domain::X,
            Direction::YToX => Domain::Y,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::XToY),
            "y2x" => Ok(Direction::YToX),
            other => Err(Error::Config(format!("invalid direction `{other}` (expected x2y or y2x)"))),
        }
    }
}

/// Translated frames of a clip plus per-frame wall time.
#[derive(Debug, Clone)]
pub struct Translation {
    pub frames: Vec<FrameTensor>,
    pub seconds_per_frame: Vec<f64>,
}

impl Translation {
    pub fn mean_seconds(&self) -> f64 {
        if self.seconds_per_frame.is_empty() {
            return 0.0;
        }
        self.seconds_per_frame.iter().sum::<f64>() / self.seconds_per_frame.len() as f64
    }
}

/// Per-frame inference through the generator of `direction`.
pub fn translate_clip(bundle: &ModelBundle, clip: &VideoClip, direction: Direction) -> Result<Translation> {
    if clip.is_empty() {
        return Err(Error::ClipTooShort {
            clip: clip.clip_id.clone(),
            len: 0,
        });
    }
    let loader = FrameLoader::new(bundle.config.image_size, bundle.dtype(), Device::Cpu);
    let generator = bundle.translator(direction.source());
    let mut frames = Vec::with_capacity(clip.len());
    let mut seconds = Vec::with_capacity(clip.len());
    for path in &clip.frame_paths {
        let input = loader.load(path)?;
        let start = Instant::now();
        let out = crate::networks::generate(generator, &input)?;
        seconds.push(start.elapsed().as_secs_f64());
        frames.push(out);
    }
    Ok(Translation {
        frames,
        seconds_per_frame: seconds,
    })
}

const PARAM_PREFIX: &str = "param/";
const FROZEN_PREFIX: &str = "perceptual/";

fn optimizer_tensors(prefix: &str, opt: &Adam, out: &mut Vec<(String, Tensor)>) {
    for (k, t) in &opt.first {
        out.push((format!("{prefix}/m/{k}"), t.clone()));
    }
    for (k, t) in &opt.second {
        out.push((format!("{prefix}/v/{k}"), t.clone()));
    }
}

/// Writes parameters, optimizer moments, iteration, RNG position and config
/// to one safetensors archive.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in state.bundle.store.tensors() {
        tensors.push((format!("{PARAM_PREFIX}{name}"), t));
    }
    for (name, t) in state.bundle.perceptual.params() {
        tensors.push((format!("{FROZEN_PREFIX}{name}"), t.clone()));
    }
    optimizer_tensors("adam_g", &state.gen_opt, &mut tensors);
    optimizer_tensors("adam_d", &state.disc_opt, &mut tensors);

    let mut meta = HashMap::new();
    meta.insert("schema_version".to_string(), CHECKPOINT_SCHEMA_VERSION.to_string());
    meta.insert("iteration".to_string(), state.iteration.to_string());
    meta.insert("adam_g_steps".to_string(), state.gen_opt.step.to_string());
    meta.insert("adam_d_steps".to_string(), state.disc_opt.step.to_string());
    meta.insert("rng_seed".to_string(), hex(&state.rng.get_seed()));
    meta.insert("rng_stream".to_string(), state.rng.get_stream().to_string());
    meta.insert("rng_word_pos".to_string(), state.rng.get_word_pos().to_string());
    meta.insert("config".to_string(), json(cfg)?);
    meta.insert("running".to_string(), json(&state.running)?);
    meta.insert("motion_locations".to_string(), json(&state.motion_locations)?);

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint("malformed rng seed".into());
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

struct Archive {
    meta: HashMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let corrupt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let version: u32 = meta
            .get("schema_version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing schema version", path.display())))?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(corrupt)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = candle_core::safetensors::Load::load(&view, &Device::Cpu)?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    fn bundle(&self, cfg: &TrainConfig) -> Result<ModelBundle> {
        let mut bundle = ModelBundle::new(&cfg.model, cfg.seed)?;
        bundle.store.assign(&self.with_prefix(PARAM_PREFIX))?;
        let frozen = self.with_prefix(FROZEN_PREFIX);
        if frozen.len() != bundle.perceptual.params().len() {
            return Err(Error::Checkpoint("perceptual extractor parameters do not match".into()));
        }
        bundle.perceptual = PerceptualExtractor::from_params(&cfg.model.perceptual, frozen, bundle.dtype(), &Device::Cpu)?;
        Ok(bundle)
    }
}

fn restore_optimizer(archive: &Archive, prefix: &str, opt: &mut Adam, steps: u64) {
    opt.step = steps;
    opt.first = archive.with_prefix(&format!("{prefix}/m/"));
    opt.second = archive.with_prefix(&format!("{prefix}/v/"));
}

/// Restores a full training state and the config it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let archive = Archive::read(path)?;
    let cfg: TrainConfig = archive.meta("config")?;
    let bundle = archive.bundle(&cfg)?;
    let mut gen_opt = Adam::new(GENERATOR_GROUP, cfg.beta1, cfg.beta2);
    let mut disc_opt = Adam::new(DISCRIMINATOR_GROUP, cfg.beta1, cfg.beta2);
    let parse = |k: &str| -> Result<u64> {
        archive.raw(k)?.parse().map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
    };
    restore_optimizer(&archive, "adam_g", &mut gen_opt, parse("adam_g_steps")?);
    restore_optimizer(&archive, "adam_d", &mut disc_opt, parse("adam_d_steps")?);
    let mut rng = ChaCha8Rng::from_seed(unhex(archive.raw("rng_seed")?)?);
    rng.set_stream(parse("rng_stream")?);
    let word_pos: u128 = archive
        .raw("rng_word_pos")?
        .parse()
        .map_err(|_| Error::Checkpoint("malformed rng position".into()))?;
    rng.set_word_pos(word_pos);
    let state = TrainState {
        bundle,
        gen_opt,
        disc_opt,
        iteration: parse("iteration")?,
        rng,
        running: archive.meta("running")?,
        motion_locations: archive.meta("motion_locations")?,
    };
    Ok((state, cfg))
}

/// Loads only the networks, for inference.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let archive = Archive::read(path)?;
    let cfg: TrainConfig = archive.meta("config")?;
    archive.bundle(&cfg)
}
