//! Gated graph neural network propagation over a joint graph.
//!
//! Node states are the rows of an `R×d` matrix, where `R` is a whole number of
//! graphs of `N` nodes each. One step collects messages
//! `j_n = Σ_{n' ∈ Ω(n)} W·i_{n'}` and then applies a GRU update per node:
//!
//! ```text
//! z  = σ(W_z·j + U_z·i + b_z)
//! r  = σ(W_r·j + U_r·i + b_r)
//! h̃  = tanh(W_h·j + U_h·(r ⊙ i) + b_h)
//! i' = (1 − z) ⊙ i + z ⊙ h̃
//! ```
//!
//! All weights are `d×d` and shared by every node and every step.

use rand::Rng;

use crate::autodiff::{NeighborLists, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

/// How message matrices are tied across edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MessageTying {
    /// One matrix for every edge in both directions.
    #[default]
    Shared,
    /// One matrix for child→parent messages and one for parent→child.
    PerDirection,
}

impl MessageTying {
    pub fn name(self) -> &'static str {
        match self {
            MessageTying::Shared => "shared",
            MessageTying::PerDirection => "per-direction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(MessageTying::Shared),
            "per-direction" => Some(MessageTying::PerDirection),
            _ => None,
        }
    }
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

fn message_names(tying: MessageTying) -> &'static [&'static str] {
    match tying {
        MessageTying::Shared => &["w_msg"],
        MessageTying::PerDirection => &["w_msg_up", "w_msg_down"],
    }
}

/// GGNN weights as plain tensors, stored under fixed names.
#[derive(Clone, Debug, PartialEq)]
pub struct GgnnParams {
    pub dim: usize,
    pub tying: MessageTying,
    set: ParamSet,
}

impl GgnnParams {
    pub fn zeros(dim: usize, tying: MessageTying) -> Self {
        let mut set = ParamSet::new();
        for name in message_names(tying).iter().chain(&GRU_NAMES) {
            let shape = if name.starts_with("b_") { vec![dim] } else { vec![dim, dim] };
            set.push(*name, Tensor::zeros(shape));
        }
        GgnnParams { dim, tying, set }
    }

    /// Matrices uniform in `±1/sqrt(d)`, biases zero.
    pub fn random(dim: usize, tying: MessageTying, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim, tying);
        let bound = 1.0 / (dim as f64).sqrt();
        for (name, t) in p.set.names().to_vec().iter().zip(p.set.tensors_mut()) {
            if !name.starts_with("b_") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        p
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.set.index_of(name).map(|i| self.set.get(i))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .set
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("unknown GGNN parameter {name:?}")))?;
        let slot = &mut self.set.tensors_mut()[i];
        if slot.shape() != value.shape() {
            return Err(Error::shape("ggnn param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.set
    }

    pub fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    /// Copies every tensor into `target` under `prefix`.
    pub fn append_to(&self, target: &mut ParamSet, prefix: &str) {
        for (name, t) in self.set.iter() {
            target.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<GgnnVars> {
        let vars = self.set.bind(tape, track);
        GgnnVars::lookup(&self.set, &vars, "", self.tying)
    }
}

/// GGNN weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct GgnnVars {
    pub dim: usize,
    msg: Vec<Var>,
    w_z: Var,
    w_r: Var,
    w_h: Var,
    u_z: Var,
    u_r: Var,
    u_h: Var,
    b_z: Var,
    b_r: Var,
    b_h: Var,
}

impl GgnnVars {
    /// Finds the GGNN weights among `vars` bound from `set`, by name.
    pub fn lookup(set: &ParamSet, vars: &[Var], prefix: &str, tying: MessageTying) -> Result<Self> {
        let find = |name: &str| -> Result<Var> {
            let full = format!("{prefix}{name}");
            set.index_of(&full)
                .map(|i| vars[i])
                .ok_or_else(|| Error::invalid(format!("missing GGNN parameter {full:?}")))
        };
        let msg = message_names(tying)
            .iter()
            .map(|n| find(n))
            .collect::<Result<Vec<_>>>()?;
        let w_z = find("w_z")?;
        let dim = set.get(set.index_of(&format!("{prefix}w_z")).expect("found above")).shape()[0];
        Ok(GgnnVars {
            dim,
            msg,
            w_z,
            w_r: find("w_r")?,
            w_h: find("w_h")?,
            u_z: find("u_z")?,
            u_r: find("u_r")?,
            u_h: find("u_h")?,
            b_z: find("b_z")?,
            b_r: find("b_r")?,
            b_h: find("b_h")?,
        })
    }

    pub fn tying(&self) -> MessageTying {
        if self.msg.len() == 1 {
            MessageTying::Shared
        } else {
            MessageTying::PerDirection
        }
    }
}

/// Neighbour structure used by message collection.
#[derive(Clone, Debug)]
pub struct MessageGraph {
    n_nodes: usize,
    lists: Vec<NeighborLists>,
}

impl MessageGraph {
    pub fn new(graph: &SkeletonGraph, tying: MessageTying) -> Self {
        let lists = match tying {
            MessageTying::Shared => vec![graph.neighbor_lists()],
            MessageTying::PerDirection => {
                let (children, parent) = graph.directed_lists();
                vec![children, parent]
            }
        };
        MessageGraph {
            n_nodes: graph.n_nodes(),
            lists,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
}

/// `x·Wᵀ`, i.e. `W` applied to every row of `x`.
fn apply_rows(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(x, wt)
}

fn check_states(tape: &Tape, graph: &MessageGraph, states: Var, p: &GgnnVars) -> Result<()> {
    let shape = tape.shape(states);
    match *shape {
        [rows, d] if d == p.dim && rows % graph.n_nodes == 0 => Ok(()),
        _ => Err(Error::shape("ggnn states", shape, &[graph.n_nodes, p.dim])),
    }
}

/// `j_n = Σ_{n' ∈ Ω(n)} W·i_{n'}` for every node row.
pub fn collect_messages(tape: &mut Tape, graph: &MessageGraph, states: Var, p: &GgnnVars) -> Result<Var> {
    check_states(tape, graph, states, p)?;
    if graph.lists.len() != p.msg.len() {
        return Err(Error::invalid("message graph and parameters use different tying"));
    }
    let mut total: Option<Var> = None;
    for (lists, &w) in graph.lists.iter().zip(&p.msg) {
        let agg = tape.graph_aggregate(states, lists.clone())?;
        let msg = apply_rows(tape, agg, w)?;
        total = Some(match total {
            None => msg,
            Some(t) => tape.add(t, msg)?,
        });
    }
    Ok(total.expect("at least one message matrix"))
}

fn gate(tape: &mut Tape, j: Var, i: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let wj = apply_rows(tape, j, w)?;
    let ui = apply_rows(tape, i, u)?;
    let s = tape.add(wj, ui)?;
    tape.add_row_bias(s, b)
}

/// One GRU update of every node state from its collected messages.
pub fn gru_update(tape: &mut Tape, states: Var, messages: Var, p: &GgnnVars) -> Result<Var> {
    if tape.shape(states) != tape.shape(messages) {
        return Err(Error::shape("gru_update", tape.shape(states), tape.shape(messages)));
    }
    let zp = gate(tape, messages, states, p.w_z, p.u_z, p.b_z)?;
    let z = tape.sigmoid(zp);
    let rp = gate(tape, messages, states, p.w_r, p.u_r, p.b_r)?;
    let r = tape.sigmoid(rp);
    let ri = tape.mul(r, states)?;
    let hp = gate(tape, messages, ri, p.w_h, p.u_h, p.b_h)?;
    let h = tape.tanh(hp);
    let keep = tape.one_minus(z);
    let old = tape.mul(keep, states)?;
    let new = tape.mul(z, h)?;
    tape.add(old, new)
}

/// `steps` rounds of message collection followed by a GRU update.
pub fn propagate(
    tape: &mut Tape,
    graph: &MessageGraph,
    initial: Var,
    p: &GgnnVars,
    steps: usize,
) -> Result<Var> {
    check_states(tape, graph, initial, p)?;
    let mut s = initial;
    for _ in 0..steps {
        let j = collect_messages(tape, graph, s, p)?;
        s = gru_update(tape, s, j, p)?;
    }
    Ok(s)
}

/// Convenience wrapper running [`propagate`] on plain tensors.
pub fn propagate_values(
    graph: &SkeletonGraph,
    initial: &Tensor,
    params: &GgnnParams,
    steps: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mg = MessageGraph::new(graph, params.tying);
    let p = params.bind(&mut tape, false)?;
    let s0 = tape.leaf(initial.clone());
    let out = propagate(&mut tape, &mg, s0, &p, steps)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
