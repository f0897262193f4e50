//! Every training loss as a differentiable scalar tensor.
//!
//! Frames are `(1, 3, H, W)` tensors. All frame-level terms are mean-reduced
//! so the weights do not depend on resolution.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::networks::{Discriminator, FrameMap, FramePredictor, PatchEmbedder, PerceptualExtractor};
use crate::{Error, Result};

/// Guards the denominator of the motion-degree ratio.
pub const MOTION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialMode {
    /// `log D(real) + log(1 - D(fake))`; needs sigmoid-terminated scores.
    Log,
    LeastSquares,
}

/// Which translation directions receive the contrastive similarity terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityDirections {
    Both,
    XToY,
    YToX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cycle consistency.
    pub lambda1: f64,
    /// Recurrent.
    pub lambda2: f64,
    /// Recycle.
    pub lambda3: f64,
    /// External similarity.
    pub lambda4: f64,
    /// Internal similarity.
    pub lambda5: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Sampled positions per patch layer. Each query has `patches - 1` negatives.
    pub patches: usize,
    pub adversarial_mode: AdversarialMode,
    pub similarity_directions: SimilarityDirections,
    /// Block the external-similarity gradient on the input-frame side.
    pub detach_similarity_input: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 0.1,
            lambda5: 40.0,
            tau: 0.07,
            patches: 256,
            adversarial_mode: AdversarialMode::LeastSquares,
            similarity_directions: SimilarityDirections::Both,
            detach_similarity_input: false,
        }
    }
}

impl LossWeights {
    pub fn negatives(&self) -> usize {
        self.patches.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Temperature(self.tau));
        }
        if self.patches < 2 {
            return Err(Error::Config("loss.patches must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Adversarial,
    Cycle,
    Recurrent,
    Recycle,
    ExternalSimilarity,
    InternalSimilarity,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Adversarial,
        LossTerm::Cycle,
        LossTerm::Recurrent,
        LossTerm::Recycle,
        LossTerm::ExternalSimilarity,
        LossTerm::InternalSimilarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Adversarial => "adv",
            LossTerm::Cycle => "cyc",
            LossTerm::Recurrent => "rcur",
            LossTerm::Recycle => "rcyc",
            LossTerm::ExternalSimilarity => "exs",
            LossTerm::InternalSimilarity => "ins",
        }
    }

    /// Weight applied in the total objective.
    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            LossTerm::Adversarial => 1.0,
            LossTerm::Cycle => w.lambda1,
            LossTerm::Recurrent => w.lambda2,
            LossTerm::Recycle => w.lambda3,
            LossTerm::ExternalSimilarity => w.lambda4,
            LossTerm::InternalSimilarity => w.lambda5,
        }
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.dims()),
            got: format!("{:?}", b.dims()),
        });
    }
    Ok(())
}

/// Patch-averaged `(d_loss, g_loss)` from precomputed score maps.
pub fn adversarial_from_scores(real: &Tensor, fake: &Tensor, mode: AdversarialMode) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake, mode)?, generator_adversarial_loss(fake, mode)?))
}

fn check_probabilities(scores: &Tensor) -> Result<()> {
    let lo = scalar(&scores.min_all()?)?;
    let hi = scalar(&scores.max_all()?)?;
    if !(lo > 0.0) {
        return Err(Error::ScoreRange(lo));
    }
    if !(hi < 1.0) {
        return Err(Error::ScoreRange(hi));
    }
    Ok(())
}

pub fn discriminator_loss(real: &Tensor, fake: &Tensor, mode: AdversarialMode) -> Result<Tensor> {
    match mode {
        AdversarialMode::Log => {
            check_probabilities(real)?;
            check_probabilities(fake)?;
            let real_term = real.log()?.mean_all()?;
            let fake_term = (1.0 - fake)?.log()?.mean_all()?;
            Ok((real_term + fake_term)?.neg()?)
        }
        AdversarialMode::LeastSquares => {
            let real_term = (real - 1.0)?.sqr()?.mean_all()?;
            let fake_term = fake.sqr()?.mean_all()?;
            Ok(((real_term + fake_term)? * 0.5)?)
        }
    }
}

/// Non-saturating in log mode.
pub fn generator_adversarial_loss(fake: &Tensor, mode: AdversarialMode) -> Result<Tensor> {
    match mode {
        AdversarialMode::Log => {
            check_probabilities(fake)?;
            Ok(fake.log()?.mean_all()?.neg()?)
        }
        AdversarialMode::LeastSquares => Ok((fake - 1.0)?.sqr()?.mean_all()?),
    }
}

/// Scores `real` and `fake` with `d`; returns `(d_loss, g_loss)`.
pub fn adversarial_loss(
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    mode: AdversarialMode,
) -> Result<(Tensor, Tensor)> {
    same_shape(real, fake)?;
    adversarial_from_scores(&d.forward(real)?, &d.forward(fake)?, mode)
}

/// Mean absolute difference.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `M M^T / (C H W)` for a `(C, H, W)` or `(1, C, H, W)` map.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let f = if f.rank() == 4 { f.squeeze(0)? } else { f.clone() };
    let (c, h, w) = f.dims3()?;
    let m = f.reshape((c, h * w))?;
    Ok((m.matmul(&m.t()?)? / (c * h * w) as f64)?)
}

/// `(content, style)` summed over `layers`.
pub fn perceptual_parts(
    extractor: &PerceptualExtractor,
    a: &Tensor,
    b: &Tensor,
    layers: &[usize],
) -> Result<(Tensor, Tensor)> {
    same_shape(a, b)?;
    let fa = extractor.features(a, layers)?;
    let fb = extractor.features(b, layers)?;
    let zero = Tensor::zeros((), a.dtype(), a.device())?;
    let (mut content, mut style) = (zero.clone(), zero);
    for (x, y) in fa.iter().zip(&fb) {
        content = (content + (x - y)?.sqr()?.mean_all()?)?;
        style = (style + (gram(x)? - gram(y)?)?.sqr()?.sum_all()?)?;
    }
    Ok((content, style))
}

/// Feature distance normalized by `C_l H_l W_l`, summed over layers.
pub fn perceptual_content(extractor: &PerceptualExtractor, a: &Tensor, b: &Tensor, layers: &[usize]) -> Result<Tensor> {
    Ok(perceptual_parts(extractor, a, b, layers)?.0)
}

/// Squared Frobenius distance of Gram matrices, summed over layers.
pub fn perceptual_style(extractor: &PerceptualExtractor, a: &Tensor, b: &Tensor, layers: &[usize]) -> Result<Tensor> {
    Ok(perceptual_parts(extractor, a, b, layers)?.1)
}

pub fn perceptual_total(extractor: &PerceptualExtractor, a: &Tensor, b: &Tensor, layers: &[usize]) -> Result<Tensor> {
    let (c, s) = perceptual_parts(extractor, a, b, layers)?;
    Ok((c + s)?)
}

/// Pixel and (optional) perceptual parts of one reconstruction comparison.
#[derive(Debug, Clone)]
pub struct ReconstructionTerms {
    pub l1: Tensor,
    pub perceptual: Option<Tensor>,
}

impl ReconstructionTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(match &self.perceptual {
            Some(p) => (&self.l1 + p)?,
            None => self.l1.clone(),
        })
    }
}

/// `|target - output|_1` plus the perceptual loss when an extractor is given.
pub fn reconstruction(
    target: &Tensor,
    output: &Tensor,
    perceptual: Option<(&PerceptualExtractor, &[usize])>,
) -> Result<ReconstructionTerms> {
    let l1 = l1_distance(target, output)?;
    let perceptual = match perceptual {
        Some((e, layers)) => Some(perceptual_total(e, target, output, layers)?),
        None => None,
    };
    Ok(ReconstructionTerms { l1, perceptual })
}

/// `x` against `G_X(G_Y(x))`.
pub fn cycle_loss(
    g_x: &dyn FrameMap,
    g_y: &dyn FrameMap,
    extractor: &PerceptualExtractor,
    layers: &[usize],
    x: &Tensor,
) -> Result<Tensor> {
    let rec = g_x.forward(&g_y.forward(x)?)?;
    reconstruction(x, &rec, Some((extractor, layers)))?.total()
}

/// The third frame of a triplet against `P_X` applied to the first two.
pub fn recurrent_loss(
    p_x: &dyn FramePredictor,
    extractor: &PerceptualExtractor,
    layers: &[usize],
    triplet: [&Tensor; 3],
) -> Result<Tensor> {
    let pred = p_x.predict(triplet[0], triplet[1])?;
    reconstruction(triplet[2], &pred, Some((extractor, layers)))?.total()
}

/// The third frame against `G_X(P_Y(G_Y(x_t), G_Y(x_t+1)))`.
pub fn recycle_loss(
    g_x: &dyn FrameMap,
    g_y: &dyn FrameMap,
    p_y: &dyn FramePredictor,
    extractor: &PerceptualExtractor,
    layers: &[usize],
    triplet: [&Tensor; 3],
) -> Result<Tensor> {
    let pred = p_y.predict(&g_y.forward(triplet[0])?, &g_y.forward(triplet[1])?)?;
    let rec = g_x.forward(&pred)?;
    reconstruction(triplet[2], &rec, Some((extractor, layers)))?.total()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Temperature(tau))
    }
}

/// Row-wise `log sum exp`, shifted by the (constant) row maximum.
fn log_sum_exp_rows(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let s = logits.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((m + s)?.squeeze(D::Minus1)?)
}

/// `-log softmax` of the positive among `{v.v+} U {v.v-_n}`, scaled by `1 / tau`.
///
/// `v` and `positive` are `(K)`, `negatives` is `(N, K)` with `N >= 0`.
pub fn info_nce(v: &Tensor, positive: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    same_shape(v, positive)?;
    let k = v.dims1()?;
    let keys = if negatives.elem_count() == 0 {
        positive.unsqueeze(0)?
    } else {
        let (_, nk) = negatives.dims2()?;
        if nk != k {
            return Err(Error::Shape {
                expected: format!("(N, {k})"),
                got: format!("{:?}", negatives.dims()),
            });
        }
        Tensor::cat(&[&positive.unsqueeze(0)?, negatives], 0)?
    };
    let logits = (keys.matmul(&v.unsqueeze(1)?)?.squeeze(1)? / tau)?;
    let lse = log_sum_exp_rows(&logits.unsqueeze(0)?)?.squeeze(0)?;
    Ok((lse - logits.get(0)?)?)
}

/// Per-query InfoNCE for co-located patch embeddings.
///
/// Row `s` of `queries` is contrasted against row `s` of `keys` (positive)
/// and every other row of `keys` (negatives). Returns `(S)`.
pub fn patch_nce(queries: &Tensor, keys: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    same_shape(queries, keys)?;
    let (s, _) = queries.dims2()?;
    let logits = (queries.matmul(&keys.t()?)? / tau)?;
    let eye = Tensor::eye(s, logits.dtype(), logits.device())?;
    let positive = (&logits * &eye)?.sum(1)?;
    Ok((log_sum_exp_rows(&logits)? - positive)?)
}

/// Mean patch InfoNCE over all layers and positions, from embeddings.
pub fn external_similarity_from_embeddings(queries: &[Tensor], keys: &[Tensor], tau: f64) -> Result<Tensor> {
    let mut sum: Option<Tensor> = None;
    let mut count = 0usize;
    for (q, k) in queries.iter().zip(keys) {
        let per = patch_nce(q, k, tau)?;
        count += per.elem_count();
        let s = per.sum_all()?;
        sum = Some(match sum {
            Some(acc) => (acc + s)?,
            None => s,
        });
    }
    let sum = sum.ok_or_else(|| Error::Config("no patch layers".into()))?;
    Ok((sum / count as f64)?)
}

fn check_locations(layers: &[usize], locations: &[Vec<usize>]) -> Result<()> {
    for (&layer, locs) in layers.iter().zip(locations) {
        if locs.len() < 2 {
            return Err(Error::TooFewLocations {
                layer,
                count: locs.len(),
            });
        }
    }
    Ok(())
}

/// Patches of `y_synth` (queries) against co-located patches of `x`
/// (positives) with the other sampled `x` patches as negatives.
pub fn external_similarity(
    embedder: PatchEmbedder<'_>,
    x: &Tensor,
    y_synth: &Tensor,
    locations: &[Vec<usize>],
    tau: f64,
    detach_input: bool,
) -> Result<Tensor> {
    check_locations(embedder.layers(), locations)?;
    let mut x_maps = embedder.feature_maps(x)?;
    if detach_input {
        x_maps = x_maps.into_iter().map(|m| m.detach()).collect();
    }
    let keys = embedder.embed_maps(&x_maps, locations)?;
    let queries = embedder.embed(y_synth, locations)?;
    external_similarity_from_embeddings(&queries, &keys, tau)
}

/// Per-layer mean InfoNCE of `later` (queries) against `earlier` (keys).
fn pair_discrepancy(earlier: &[Tensor], later: &[Tensor], tau: f64) -> Result<Vec<Tensor>> {
    earlier
        .iter()
        .zip(later)
        .map(|(k, q)| Ok(patch_nce(q, k, tau)?.mean_all()?))
        .collect()
}

/// `(L)` vector of `v<t+1,t+2>(l) / (v<t,t+1>(l) + eps)` from the embeddings of
/// three consecutive frames taken at one fixed location set.
pub fn motion_degree_from_embeddings(frames: [&[Tensor]; 3], tau: f64) -> Result<Tensor> {
    let first = pair_discrepancy(frames[0], frames[1], tau)?;
    let second = pair_discrepancy(frames[1], frames[2], tau)?;
    let first = Tensor::stack(&first, 0)?;
    let second = Tensor::stack(&second, 0)?;
    Ok(second.broadcast_div(&(first + MOTION_EPS)?)?)
}

/// Motion variation degree of a triplet under fixed sampling positions.
pub fn motion_degree(
    embedder: PatchEmbedder<'_>,
    frames: [&Tensor; 3],
    locations: &[Vec<usize>],
    tau: f64,
) -> Result<Tensor> {
    check_tau(tau)?;
    check_locations(embedder.layers(), locations)?;
    let e: Vec<Vec<Tensor>> = frames
        .iter()
        .map(|f| embedder.embed(f, locations))
        .collect::<Result<_>>()?;
    motion_degree_from_embeddings([&e[0], &e[1], &e[2]], tau)
}

/// `1 - cos(d_input, d_synth)`, in `[0, 2]`.
pub fn internal_similarity(d_input: &Tensor, d_synth: &Tensor) -> Result<Tensor> {
    same_shape(d_input, d_synth)?;
    let na = d_input.sqr()?.sum_all()?.sqrt()?;
    let nb = d_synth.sqr()?.sum_all()?.sqrt()?;
    let (va, vb) = (scalar(&na)?, scalar(&nb)?);
    if !(va > 1e-12 && vb > 1e-12) || !va.is_finite() || !vb.is_finite() {
        return Err(Error::DegenerateMotion);
    }
    let cos = ((d_input * d_synth)?.sum_all()? / (na * nb)?)?;
    Ok((1.0 - cos)?.clamp(0.0, 2.0)?)
}

/// Unweighted components of the generator objective, each summed over both
/// translation directions.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub adversarial: Tensor,
    pub cycle: Tensor,
    pub recurrent: Tensor,
    pub recycle: Tensor,
    pub external_similarity: Tensor,
    pub internal_similarity: Tensor,
}

impl ObjectiveTerms {
    pub fn get(&self, term: LossTerm) -> &Tensor {
        match term {
            LossTerm::Adversarial => &self.adversarial,
            LossTerm::Cycle => &self.cycle,
            LossTerm::Recurrent => &self.recurrent,
            LossTerm::Recycle => &self.recycle,
            LossTerm::ExternalSimilarity => &self.external_similarity,
            LossTerm::InternalSimilarity => &self.internal_similarity,
        }
    }
}

/// `adv + l1 cyc + l2 rcur + l3 rcyc + l4 exs + l5 ins`.
pub fn total_objective(terms: &ObjectiveTerms, weights: &LossWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for term in LossTerm::ALL {
        let t = terms.get(term);
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite {
                term: term.name(),
                iteration: None,
            });
        }
        let weighted = (t * term.weight(weights))?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("six terms"))
}
