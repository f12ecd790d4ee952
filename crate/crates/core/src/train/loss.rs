use std::rc::Rc;

use rand::Rng;

use super::NegativeSampleSet;
use crate::diffmath::{xavier_init, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::Pair;

/// Shared linear + ReLU map applied before contrastive similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ProjectionHead {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        input_width: usize,
        d_proj: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register("proj.weight", xavier_init(&[input_width, d_proj], rng)?)?;
        let bias = store.register("proj.bias", xavier_init(&[1, d_proj], rng)?)?;
        Ok(ProjectionHead { weight, bias })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let lin = tape.matmul(h, w)?;
        let lin = tape.add(lin, b)?;
        Ok(tape.relu(lin))
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub align: f64,
    pub contrast: f64,
    pub total: f64,
}

/// Sum over seeds and their corrupted pairs of
/// `[‖h_s − h_t‖ + ρ − ‖h_s' − h_t'‖]₊`.
///
/// `source` and `target` map entity ids to rows of `emb`.
pub fn margin_alignment_loss<T: Real>(
    tape: &mut Tape<T>,
    emb: Var,
    source_rows: &[usize],
    target_rows: &[usize],
    seeds: &[Pair],
    negatives: &NegativeSampleSet,
    margin: f64,
) -> Result<Var> {
    if negatives.seed_count() != seeds.len() || negatives.k == 0 {
        return Err(Error::shape(
            "margin_alignment_loss",
            format!(
                "{} seeds but negatives for {} (k = {})",
                seeds.len(),
                negatives.seed_count(),
                negatives.k
            ),
        ));
    }
    let per = 2 * negatives.k;
    let mut pos_a = Vec::with_capacity(seeds.len() * per);
    let mut pos_b = Vec::with_capacity(seeds.len() * per);
    let mut neg_a = Vec::with_capacity(seeds.len() * per);
    let mut neg_b = Vec::with_capacity(seeds.len() * per);
    for (i, &seed) in seeds.iter().enumerate() {
        for (s2, t2) in negatives.corrupted_pairs(i, seed) {
            pos_a.push(source_rows[seed.0]);
            pos_b.push(target_rows[seed.1]);
            neg_a.push(source_rows[s2]);
            neg_b.push(target_rows[t2]);
        }
    }
    let pos = pair_distances(tape, emb, pos_a, pos_b)?;
    let neg = pair_distances(tape, emb, neg_a, neg_b)?;
    let gap = tape.sub(pos, neg)?;
    let gap = tape.add_scalar(gap, T::lit(margin));
    let hinge = tape.relu(gap);
    Ok(tape.sum_all(hinge))
}

fn pair_distances<T: Real>(tape: &mut Tape<T>, emb: Var, a: Vec<usize>, b: Vec<usize>) -> Result<Var> {
    let ra = tape.lookup_rows(emb, Rc::new(a))?;
    let rb = tape.lookup_rows(emb, Rc::new(b))?;
    let diff = tape.sub(ra, rb)?;
    tape.row_norm(diff)
}

/// Symmetric InfoNCE between the two views of one graph, averaged over
/// `2·|E|` terms. `orig` and `aug` are already projected.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, orig: Var, aug: Var) -> Result<Var> {
    let n = tape.shape(orig)[0];
    if n == 0 || tape.shape(aug) != tape.shape(orig) {
        return Err(Error::shape(
            "contrastive_loss",
            format!("views of shapes {:?} and {:?}", tape.shape(orig), tape.shape(aug)),
        ));
    }
    let aug_t = tape.transpose(aug)?;
    let sim = tape.matmul(orig, aug_t)?;
    let diag = Rc::new((0..n).collect::<Vec<_>>());
    let forward = tape.log_softmax(sim, 1)?;
    let forward = tape.pick_per_row(forward, diag.clone())?;
    let sim_t = tape.transpose(sim)?;
    let backward = tape.log_softmax(sim_t, 1)?;
    let backward = tape.pick_per_row(backward, diag)?;
    let both = tape.add(forward, backward)?;
    let total = tape.sum_all(both);
    Ok(tape.scalar_mul(total, T::lit(-1.0 / (2.0 * n as f64))))
}

/// Contrastive loss summed over the graphs whose rows are listed in
/// `graphs`, with one shared projection head.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &ProjectionHead,
    final_orig: Var,
    final_aug: Var,
    graphs: &[Rc<Vec<usize>>],
) -> Result<Var> {
    let p_orig = head.apply(tape, store, final_orig)?;
    let p_aug = head.apply(tape, store, final_aug)?;
    let mut total: Option<Var> = None;
    for rows in graphs {
        let o = tape.lookup_rows(p_orig, rows.clone())?;
        let a = tape.lookup_rows(p_aug, rows.clone())?;
        let term = info_nce(tape, o, a)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::shape("contrastive_loss", "no graphs"))
}
