//! Training: refreshed augmented views and negatives, margin alignment loss
//! on augmented embeddings, cross-view contrastive loss, Adam, and early
//! stopping on validation MRR.

mod checkpoint;
mod loss;
mod negatives;
mod selfcheck;

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use loss::{contrastive_loss, info_nce, margin_alignment_loss, LossBreakdown, ProjectionHead};
pub use negatives::{sample_negatives, truncation_window, NegativeSampleSet};
pub use selfcheck::{composite_loss_check, toy_bundle};

use crate::augment::refresh_views;
use crate::diffmath::{adam_step, AdamState, ParamStore, Real, Tape, Tensor, Var};
use crate::encoder::{embed, encode, EncoderConfig, EncoderGraph, EncoderParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::kg::{DatasetBundle, Pair};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub layers: usize,
    pub negatives_per_entity: usize,
    pub epsilon: f64,
    pub margin: f64,
    pub lambda: f64,
    pub d_ent: usize,
    pub d_rel: usize,
    pub d_proj: usize,
    /// Upper bound of the per-refresh edge deletion ratio.
    pub pr: f64,
    pub refresh_period: usize,
    pub eval_period: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub use_relation_channel: bool,
    pub use_augmented_alignment: bool,
    pub use_contrastive: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.001,
            weight_decay: 1e-5,
            dropout: 0.2,
            layers: 2,
            negatives_per_entity: 5,
            epsilon: 0.9,
            margin: 1.0,
            lambda: 100.0,
            d_ent: 256,
            d_rel: 128,
            d_proj: 128,
            pr: 0.1,
            refresh_period: 10,
            eval_period: 10,
            max_epochs: 1000,
            patience: 3,
            seed: 0,
            use_relation_channel: true,
            use_augmented_alignment: true,
            use_contrastive: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return fail(format!("epsilon {} outside [0, 1)", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.pr) {
            return fail(format!("pr {} outside [0, 1)", self.pr));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.margin >= 0.0) {
            return fail(format!("margin must be non-negative, got {}", self.margin));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("negatives_per_entity", self.negatives_per_entity),
            ("d_ent", self.d_ent),
            ("d_rel", self.d_rel),
            ("d_proj", self.d_proj),
            ("refresh_period", self.refresh_period),
            ("eval_period", self.eval_period),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_ent: self.d_ent,
            d_rel: self.d_rel,
            layers: self.layers,
            dropout: self.dropout,
            use_relation_channel: self.use_relation_channel,
        }
    }

    /// Whether the contrastive term (and its projection head) is active.
    pub fn contrastive_active(&self) -> bool {
        self.use_contrastive && self.lambda > 0.0
    }

    /// Fresh parameters for a bundle, drawn from the init stream.
    pub fn init_params<T: Real>(&self, bundle: &DatasetBundle) -> Result<EncoderParams<T>> {
        let mut rng = stream_rng(self.seed, Stream::Init);
        EncoderParams::init(
            self.encoder(),
            bundle.source.entity_count() + bundle.target.entity_count(),
            bundle.relation_count(),
            self.contrastive_active().then_some(self.d_proj),
            &mut rng,
        )
    }
}

/// The union layout of a bundle: source rows first, then target rows.
#[derive(Clone, Debug)]
pub struct UnionLayout {
    pub n_source: usize,
    pub n_target: usize,
    pub source_rows: Rc<Vec<usize>>,
    pub target_rows: Rc<Vec<usize>>,
}

impl UnionLayout {
    pub fn new(n_source: usize, n_target: usize) -> Self {
        UnionLayout {
            n_source,
            n_target,
            source_rows: Rc::new((0..n_source).collect()),
            target_rows: Rc::new((n_source..n_source + n_target).collect()),
        }
    }

    pub fn of(bundle: &DatasetBundle) -> Self {
        Self::new(bundle.source.entity_count(), bundle.target.entity_count())
    }

    /// Splits union embeddings into source and target blocks.
    pub fn split<T: Real>(&self, emb: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        (emb.gather_rows(&self.source_rows), emb.gather_rows(&self.target_rows))
    }
}

/// Encoder graph over both original graphs.
pub fn original_graph(bundle: &DatasetBundle) -> Result<EncoderGraph> {
    EncoderGraph::new(&[
        (bundle.source.adjacency(), 0),
        (bundle.target.adjacency(), bundle.source.entity_count()),
    ])
}

/// Everything the objective reads besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub layout: &'a UnionLayout,
    pub original: &'a EncoderGraph,
    /// `None` means the augmented views equal the originals.
    pub augmented: Option<&'a EncoderGraph>,
    pub seeds: &'a [Pair],
    pub negatives: &'a NegativeSampleSet,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub align: Var,
    pub contrast: Option<Var>,
    pub total: Var,
}

/// Builds `L_a + λ·L_c` on `tape`.
pub fn objective<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &EncoderParams<T>,
    cfg: &TrainingConfig,
    inputs: ObjectiveInputs<'_>,
    training: bool,
    rng: &mut R,
) -> Result<ObjectiveVars> {
    let contrastive = cfg.contrastive_active();
    let augmented = inputs.augmented.unwrap_or(inputs.original);
    let need_orig = contrastive || !cfg.use_augmented_alignment;
    let need_aug = contrastive || cfg.use_augmented_alignment;
    let orig = if need_orig {
        Some(encode(tape, params, inputs.original, training, rng)?.final_repr)
    } else {
        None
    };
    let aug = if need_aug {
        Some(encode(tape, params, augmented, training, rng)?.final_repr)
    } else {
        None
    };
    let align_input = if cfg.use_augmented_alignment { aug } else { orig }.expect("encoded above");
    let align = margin_alignment_loss(
        tape,
        align_input,
        &inputs.layout.source_rows,
        &inputs.layout.target_rows,
        inputs.seeds,
        inputs.negatives,
        cfg.margin,
    )?;
    if !contrastive {
        return Ok(ObjectiveVars {
            align,
            contrast: None,
            total: align,
        });
    }
    let head = params
        .projection
        .as_ref()
        .ok_or_else(|| Error::Config("contrastive loss needs a projection head".into()))?;
    let contrast = contrastive_loss(
        tape,
        &params.store,
        head,
        orig.expect("encoded above"),
        aug.expect("encoded above"),
        &[inputs.layout.source_rows.clone(), inputs.layout.target_rows.clone()],
    )?;
    let weighted = tape.scalar_mul(contrast, T::lit(cfg.lambda));
    let total = tape.add(align, weighted)?;
    Ok(ObjectiveVars {
        align,
        contrast: Some(contrast),
        total,
    })
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation MRR (or the last epoch when no
    /// validation ran).
    pub params: EncoderParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mrr: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Final state of each random stream, keyed by stream id.
    pub rng_streams: Vec<(u8, ChaCha8Rng)>,
}

/// Source→target MRR of `pairs` on original-graph embeddings.
pub fn validation_mrr<T: Real>(
    params: &EncoderParams<T>,
    graph: &EncoderGraph,
    layout: &UnionLayout,
    pairs: &[Pair],
) -> Result<f64> {
    let emb = embed(params, graph)?;
    let (s, t) = layout.split(&emb);
    Ok(eval::evaluate(pairs, &s, &t)?.0.mrr)
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Runs the full training loop. `on_epoch` sees every record as soon as it
/// is produced, so logs survive an aborted run.
pub fn train<T: Real>(
    bundle: &DatasetBundle,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let seeds = &bundle.seeds.train;
    if seeds.is_empty() {
        return Err(Error::Config("no training seeds".into()));
    }
    let layout = UnionLayout::of(bundle);
    let original = original_graph(bundle)?;
    let mut params = cfg.init_params::<T>(bundle)?;
    let mut adam = AdamState::new(&params.store);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut augment_rng = stream_rng(cfg.seed, Stream::Augment);
    let mut negative_rng = stream_rng(cfg.seed, Stream::Negatives);
    let uses_views = cfg.pr > 0.0 && (cfg.contrastive_active() || cfg.use_augmented_alignment);

    let mut augmented: Option<EncoderGraph> = None;
    let mut negatives = NegativeSampleSet::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        if epoch % cfg.refresh_period == 0 {
            if uses_views {
                let (sv, tv) = refresh_views(&bundle.source, &bundle.target, cfg.pr, &mut augment_rng)?;
                log::debug!(
                    "epoch {epoch}: views keep {}/{} and {}/{} triples",
                    sv.triple_count(),
                    bundle.source.triples().len(),
                    tv.triple_count(),
                    bundle.target.triples().len()
                );
                augmented = Some(EncoderGraph::new(&[
                    (sv.adjacency(), 0),
                    (tv.adjacency(), layout.n_source),
                ])?);
            }
            let emb = embed(&params, &original)?;
            let (s, t) = layout.split(&emb);
            negatives = sample_negatives(seeds, &s, &t, cfg.epsilon, cfg.negatives_per_entity, &mut negative_rng)?;
        }

        let mut tape = Tape::new();
        // bind everything so untouched parameters still get (zero) gradients
        for id in params.store.ids() {
            tape.param(&params.store, id);
        }
        let inputs = ObjectiveInputs {
            layout: &layout,
            original: &original,
            augmented: augmented.as_ref(),
            seeds,
            negatives: &negatives,
        };
        let vars = objective(&mut tape, &params, cfg, inputs, true, &mut dropout_rng)?;
        let loss = LossBreakdown {
            align: scalar(&tape, vars.align),
            contrast: vars.contrast.map_or(0.0, |v| scalar(&tape, v)),
            total: scalar(&tape, vars.total),
        };
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}: L_a = {}, L_c = {}, total = {}",
                loss.align, loss.contrast, loss.total
            )));
        }
        let grads = tape.backward(vars.total)?;
        grads.accumulate_into(&mut params.store);
        adam_step(&mut params.store, &mut adam, cfg.lr, cfg.weight_decay)?;
        if let Some(id) = params.store.ids().find(|&id| params.store.value(id).has_non_finite()) {
            on_epoch(&EpochRecord {
                epoch,
                loss,
                val_mrr: None,
            });
            return Err(Error::Numeric(format!(
                "parameter `{}` became non-finite at epoch {epoch} (L_a = {}, L_c = {})",
                params.store.name(id),
                loss.align,
                loss.contrast
            )));
        }
        epochs_run = epoch + 1;

        let mut record = EpochRecord {
            epoch,
            loss,
            val_mrr: None,
        };
        if (epoch + 1) % cfg.eval_period == 0 && !bundle.seeds.valid.is_empty() {
            let mrr = validation_mrr(&params, &original, &layout, &bundle.seeds.valid)?;
            record.val_mrr = Some(mrr);
            if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                best = Some((mrr, epoch, params.store.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {epoch}: L_a {:.6} L_c {:.6} total {:.6}{}",
            record.loss.align,
            record.loss.contrast,
            record.loss.total,
            record.val_mrr.map(|m| format!(" val MRR {m:.4}")).unwrap_or_default()
        );
        on_epoch(&record);
        history.push(record);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_mrr, best_epoch) = match best {
        Some((mrr, epoch, store)) => {
            params.store = store;
            (Some(mrr), Some(epoch))
        }
        None => (None, None),
    };
    let rng_streams = vec![
        (Stream::Dropout as u8, dropout_rng),
        (Stream::Augment as u8, augment_rng),
        (Stream::Negatives as u8, negative_rng),
    ];
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_val_mrr,
        epochs_run,
        stopped_early,
        rng_streams,
    })
}
