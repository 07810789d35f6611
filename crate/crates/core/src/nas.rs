//! Super-network search over which sites should be Bayesian.
//!
//! Every candidate site carries both a point branch and an uncertain
//! (Bayesian or GP) branch, mixed by `softmax(a_point, a_bayes)`. The
//! architecture logits are trained jointly with all other parameters on
//! the ordinary objective, then selections are ranked by the product of
//! the chosen gates.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Corpus, Vocabulary};
use crate::model::{Arch, ArchGate, Branch, LanguageModel, ModelError, ModelKind, Site, SiteKind};
use crate::optim::SgdState;
use crate::rng::RngStream;
use crate::train::{apply_grads, collect_grads, objective, train, Frozen, ObjectiveConfig, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Bayes,
    Gp,
}

/// Default candidate sites: LSTM gates of every layer (Bayes) or the
/// cell input, output gate and h-gate (GP); Transformer FFN layers.
pub fn search_space(arch: &Arch, variant: Variant) -> Vec<Site> {
    let kinds: &[SiteKind] = match (arch.kind(), variant) {
        (ModelKind::Lstm, Variant::Bayes) => &[
            SiteKind::InputGate,
            SiteKind::ForgetGate,
            SiteKind::CellInput,
            SiteKind::OutputGate,
        ],
        (ModelKind::Lstm, Variant::Gp) => &[SiteKind::CellInput, SiteKind::OutputGate, SiteKind::HGate],
        (ModelKind::Transformer, _) => &[SiteKind::Ffn],
    };
    (1..=arch.num_layers())
        .flat_map(|l| kinds.iter().map(move |&k| Site::new(l, k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNet {
    pub model: LanguageModel,
    /// Candidate sites in ascending order.
    pub locations: Vec<Site>,
    pub variant: Variant,
}

impl SuperNet {
    /// Wraps every location of a point-estimate `base` in a gated pair of
    /// branches. Both branches start from the base weights and the
    /// logits start at 0.
    pub fn new(base: &LanguageModel, locations: &[Site], variant: Variant, prior_sigma: Option<f64>) -> Result<Self, ModelError> {
        if !(base.bayes.is_empty() && base.gp.is_empty() && base.gates.is_empty()) {
            return Err(ModelError::Config("the super-network needs a point-estimate base model".into()));
        }
        let mut locs = locations.to_vec();
        locs.sort();
        locs.dedup();
        if locs.is_empty() {
            return Err(ModelError::Config("no candidate locations".into()));
        }
        let sigma = prior_sigma.unwrap_or_else(|| base.default_prior_sigma());
        let mut model = base.clone();
        for &s in &locs {
            if s.activation().is_none() {
                return Err(ModelError::Site {
                    site: s.to_string(),
                    reason: "only gate and feed-forward sites can be searched".into(),
                });
            }
            match variant {
                Variant::Bayes => model.add_bayes(s, sigma, true)?,
                Variant::Gp => model.add_gp(s, sigma, true)?,
            }
            model.gates.insert(s, ArchGate::new());
        }
        Ok(Self {
            model,
            locations: locs,
            variant,
        })
    }

    pub fn gates(&self) -> Vec<(f64, f64)> {
        self.locations.iter().map(|s| self.model.gates[s].gates()).collect()
    }

    /// Copy whose gates are fixed to the selected branches.
    pub fn with_hard_gates(&self, sel: &ArchSelection) -> Result<SuperNet, ModelError> {
        self.check(sel)?;
        let mut sn = self.clone();
        for (s, &b) in self.locations.iter().zip(&sel.bayes) {
            sn.model.gates.get_mut(s).expect("gate").hard = Some(if b { Branch::Bayes } else { Branch::Point });
        }
        Ok(sn)
    }

    fn check(&self, sel: &ArchSelection) -> Result<(), ModelError> {
        if sel.bayes.len() != self.locations.len() {
            return Err(ModelError::Config(format!(
                "selection covers {} locations, super-network has {}",
                sel.bayes.len(),
                self.locations.len()
            )));
        }
        Ok(())
    }
}

/// Which locations take the uncertain branch, with the product of the
/// chosen gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSelection {
    pub bayes: Vec<bool>,
    pub score: f64,
}

impl ArchSelection {
    pub fn num_bayes(&self) -> usize {
        self.bayes.iter().filter(|&&b| b).count()
    }

    pub fn sites(&self, locations: &[Site]) -> Vec<Site> {
        locations.iter().zip(&self.bayes).filter(|(_, &b)| b).map(|(s, _)| *s).collect()
    }
}

/// Product of the selected gate values, multiplied in location order.
pub fn selection_score(gates: &[(f64, f64)], bayes: &[bool]) -> f64 {
    gates
        .iter()
        .zip(bayes)
        .map(|(&(p, b), &sel)| if sel { b } else { p })
        .product()
}

/// Order among selections: higher score first; among equal scores fewer
/// Bayesian locations first, then the one whose Bayesian locations have
/// the lower indices.
pub fn selection_order(a: &ArchSelection, b: &ArchSelection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.num_bayes().cmp(&b.num_bayes()))
        .then_with(|| {
            let ia = a.bayes.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i);
            let ib = b.bayes.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i);
            ia.cmp(ib)
        })
}

#[derive(PartialEq)]
struct Node {
    cost: f64,
    /// Flipped positions in the `deltas` order; the last one is the
    /// largest.
    flips: Vec<usize>,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.flips.cmp(&self.flips))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Up to `n` best selections. Start from the per-location best branch;
/// flipping location `i` costs `ln g_best - ln g_other >= 0`, and flip
/// sets are enumerated lazily in order of total cost. Every selection
/// tied (within rounding) with the `n`-th is collected before the final
/// deterministic sort.
pub fn extract_top_n(gates: &[(f64, f64)], n: usize) -> Vec<ArchSelection> {
    let l = gates.len();
    let total = if l >= usize::BITS as usize { usize::MAX } else { 1usize << l };
    if n > total {
        warn!("requested {n} selections but only {total} exist");
    }
    let n = n.min(total);
    if n == 0 {
        return Vec::new();
    }
    let best: Vec<bool> = gates.iter().map(|&(p, b)| b > p).collect();
    let mut deltas: Vec<(f64, usize)> = gates
        .iter()
        .enumerate()
        .map(|(i, &(p, b))| ((p.max(b)).ln() - (p.min(b)).ln(), i))
        .collect();
    deltas.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    let make = |flips: &[usize]| {
        let mut bayes = best.clone();
        for &f in flips {
            let i = deltas[f].1;
            bayes[i] = !bayes[i];
        }
        ArchSelection {
            score: selection_score(gates, &bayes),
            bayes,
        }
    };
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        cost: 0.0,
        flips: Vec::new(),
    });
    let mut out = Vec::new();
    let mut cutoff = f64::INFINITY;
    while let Some(node) = heap.pop() {
        if node.cost > cutoff {
            break;
        }
        let next = node.flips.last().map_or(0, |&k| k + 1);
        if next < l {
            let mut add = node.flips.clone();
            add.push(next);
            heap.push(Node {
                cost: node.cost + deltas[next].0,
                flips: add,
            });
            if let Some(&last) = node.flips.last() {
                let mut swap = node.flips.clone();
                *swap.last_mut().expect("nonempty") = next;
                heap.push(Node {
                    cost: node.cost - deltas[last].0 + deltas[next].0,
                    flips: swap,
                });
            }
        }
        out.push(make(&node.flips));
        if out.len() == n {
            cutoff = node.cost + 1e-9 * (1.0 + node.cost.abs());
        }
    }
    out.sort_by(selection_order);
    out.truncate(n);
    out
}

pub fn extract_top_n_from(sn: &SuperNet, n: usize) -> Vec<ArchSelection> {
    extract_top_n(&sn.gates(), n)
}

/// Standalone model keeping only the selected branch at every location.
/// With `reinit_prior`, each Bayesian location's prior mean is reset to
/// the super-network's point-branch weights there.
pub fn instantiate_selection(sn: &SuperNet, sel: &ArchSelection, reinit_prior: bool) -> Result<LanguageModel, ModelError> {
    sn.check(sel)?;
    let mut m = sn.model.clone();
    m.gates.clear();
    for (s, &b) in sn.locations.iter().zip(&sel.bayes) {
        let names = s.weights();
        if b {
            for w in &names {
                let point = m.weights.remove(w);
                if let (true, Some(point)) = (reinit_prior, point) {
                    let gv = match sn.variant {
                        Variant::Bayes => m.bayes.get_mut(w),
                        Variant::Gp => m.gp.get_mut(s).and_then(|g| g.theta.as_mut()),
                    };
                    if let Some(gv) = gv {
                        gv.prior_mu = point;
                    }
                }
            }
        } else {
            for w in &names {
                m.bayes.remove(w);
            }
            m.gp.remove(s);
        }
    }
    Ok(m)
}

/// Fresh model for the selection: `base` with posteriors centred on its
/// weights at the selected locations (training from scratch rather than
/// from super-network weights).
pub fn scratch_selection(
    base: &LanguageModel,
    locations: &[Site],
    sel: &ArchSelection,
    variant: Variant,
    prior_sigma: Option<f64>,
) -> Result<LanguageModel, ModelError> {
    if sel.bayes.len() != locations.len() {
        return Err(ModelError::Config("selection does not match the locations".into()));
    }
    let sigma = prior_sigma.unwrap_or_else(|| base.default_prior_sigma());
    let mut m = base.clone();
    for s in sel.sites(locations) {
        match variant {
            Variant::Bayes => m.add_bayes(s, sigma, false)?,
            Variant::Gp => m.add_gp(s, sigma, false)?,
        }
    }
    Ok(m)
}

/// Joint training of all branches and logits with the standard loop.
pub fn train_supernet(
    sn: &mut SuperNet,
    train_corpus: &Corpus,
    dev: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainLog, TrainError> {
    train(&mut sn.model, train_corpus, dev, vocab, cfg, rng)
}

/// `steps` SGD updates on one batch at a fixed rate; returns
/// `a_bayes - a_point` per location after each step.
pub fn supernet_steps(
    sn: &mut SuperNet,
    batch: &Batch,
    steps: usize,
    lr: f64,
    obj: &ObjectiveConfig,
    frozen: &Frozen,
    rng: &RngStream,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let state = SgdState::new(lr);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let grads = {
            let mut f = crate::model::Fwd::new(&sn.model);
            let o = objective(&mut f, batch, obj, Some(&rng.fork(step as u64)))?;
            collect_grads(&mut f, o.loss, frozen)?
        };
        apply_grads(&mut sn.model, grads, &state);
        trace.push(
            sn.locations
                .iter()
                .map(|s| {
                    let l = sn.model.gates[s].logits.data();
                    l[1] - l[0]
                })
                .collect(),
        );
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchRow {
    pub location: String,
    pub a_point: f64,
    pub a_bayes: f64,
    pub g_point: f64,
    pub g_bayes: f64,
}

pub fn report_arch_weights(sn: &SuperNet) -> Vec<ArchRow> {
    sn.locations
        .iter()
        .map(|s| {
            let g = &sn.model.gates[s];
            let (gp, gb) = g.gates();
            ArchRow {
                location: s.to_string(),
                a_point: g.logits.data()[0],
                a_bayes: g.logits.data()[1],
                g_point: gp,
                g_bayes: gb,
            }
        })
        .collect()
}

pub fn arch_report_tsv(rows: &[ArchRow]) -> String {
    let mut out = String::from("location\ta_point\ta_bayes\tg_point\tg_bayes\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.location, r.a_point, r.a_bayes, r.g_point, r.g_bayes);
    }
    out
}

/// Whitespace-separated `index location g_bayes` columns for plotting.
pub fn arch_plot_data(rows: &[ArchRow]) -> String {
    let mut out = String::from("# index location g_bayes\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{i} {} {}", r.location, r.g_bayes);
    }
    out
}

pub fn selections_tsv(sels: &[ArchSelection], locations: &[Site]) -> String {
    let mut out = String::from("rank\tscore\tbayes_locations\n");
    for (i, s) in sels.iter().enumerate() {
        let sites: Vec<String> = s.sites(locations).iter().map(Site::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            i + 1,
            s.score,
            if sites.is_empty() { "-".to_string() } else { sites.join(",") }
        );
    }
    out
}

/// Location to gate map, for logging.
pub fn gate_map(sn: &SuperNet) -> BTreeMap<String, (f64, f64)> {
    sn.locations.iter().map(|s| (s.to_string(), sn.model.gates[s].gates())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_location_example() {
        let top = extract_top_n(&[(0.9, 0.1), (0.6, 0.4)], 4);
        assert_eq!(top[0].bayes, vec![false, false]);
        assert!((top[0].score - 0.54).abs() < 1e-15);
        assert_eq!(top[1].bayes, vec![false, true]);
        assert!((top[1].score - 0.36).abs() < 1e-15);
        assert_eq!(top.len(), 4);
    }

    #[test]
    fn all_ties_follow_tie_order() {
        let top = extract_top_n(&[(0.5, 0.5); 3], 8);
        let got: Vec<Vec<bool>> = top.iter().map(|s| s.bayes.clone()).collect();
        let t = true;
        let f = false;
        assert_eq!(
            got,
            vec![
                vec![f, f, f],
                vec![t, f, f],
                vec![f, t, f],
                vec![f, f, t],
                vec![t, t, f],
                vec![t, f, t],
                vec![f, t, t],
                vec![t, t, t]
            ]
        );
    }

    #[test]
    fn truncates_to_available() {
        assert_eq!(extract_top_n(&[(0.7, 0.3)], 5).len(), 2);
    }
}
