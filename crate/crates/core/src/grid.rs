//! Regular lattice on the belief simplex with barycentric interpolation.
//!
//! Nodes are the points `c / m` where `c` ranges over the non-negative integer
//! vectors summing to `m = resolution - 1`. Interpolation uses the Freudenthal
//! triangulation of the lattice, which reduces to piecewise-linear
//! interpolation on `[0, 1]` for two states.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::Belief;

const SNAP: f64 = 1e-10;
const CLAMP_TOL: f64 = 1e-12;

/// Interpolation weights: `(node index, weight)` pairs with positive weights
/// summing to one.
pub type Stencil = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct BeliefGrid {
    n_states: usize,
    resolution: usize,
    nodes: Vec<Belief>,
    lookup: HashMap<Vec<u32>, usize>,
}

impl BeliefGrid {
    /// `resolution` is the number of nodes per simplex edge; it is ignored
    /// for a single hidden state.
    pub fn new(n_states: usize, resolution: usize) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidParams("belief grid needs at least one state".into()));
        }
        if n_states > 1 && resolution < 2 {
            return Err(Error::InvalidParams(format!(
                "resolution {resolution} cannot cover the simplex vertices"
            )));
        }
        let resolution = if n_states == 1 { 1 } else { resolution };
        let m = (resolution - 1) as u32;

        let mut compositions = Vec::new();
        if n_states == 2 {
            // node k has k units on the second state
            compositions.extend((0..=m).map(|k| vec![m - k, k]));
        } else {
            let mut current = vec![0u32; n_states];
            enumerate(&mut current, 0, m, &mut compositions);
        }

        let scale = m.max(1) as f64;
        let nodes = compositions
            .iter()
            .map(|c| {
                if n_states == 1 {
                    Belief::vertex(1, 0)
                } else {
                    Belief::normalized(c.iter().map(|&k| k as f64 / scale).collect())
                }
            })
            .collect();
        let lookup = if n_states > 2 {
            compositions.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect()
        } else {
            HashMap::new()
        };
        Ok(BeliefGrid {
            n_states,
            resolution,
            nodes,
            lookup,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Belief] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Belief {
        &self.nodes[i]
    }

    /// Barycentric weights of `x` with respect to the enclosing lattice cell.
    ///
    /// `x` is clamped onto the simplex first; components within `1e-12` of
    /// a bound absorb rounding from the filter.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        debug_assert_eq!(x.len(), self.n_states);
        match self.n_states {
            1 => vec![(0, 1.0)],
            2 => self.stencil_line(x),
            _ => self.stencil_freudenthal(x),
        }
    }

    fn stencil_line(&self, x: &[f64]) -> Stencil {
        let m = (self.resolution - 1) as f64;
        let total = x[0].max(0.0) + x[1].max(0.0);
        let t = (x[1].max(0.0) / total).clamp(0.0, 1.0) * m;
        let snapped = t.round();
        if (t - snapped).abs() < SNAP {
            return vec![(snapped as usize, 1.0)];
        }
        let lo = t.floor();
        let frac = t - lo;
        let lo = lo as usize;
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }

    fn stencil_freudenthal(&self, x: &[f64]) -> Stencil {
        let n = self.n_states;
        let m = (self.resolution - 1) as f64;
        let clamped: Vec<f64> = x.iter().map(|&p| if p < CLAMP_TOL { 0.0 } else { p }).collect();
        let total: f64 = clamped.iter().sum();

        // y_i = m * sum_{j >= i} x_j, non-increasing with y_0 = m
        let mut y = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += clamped[i] / total;
            y[i] = (acc * m).min(m);
        }
        y[0] = m;
        for i in 1..n {
            if (y[i] - y[i].round()).abs() < SNAP {
                y[i] = y[i].round();
            }
            y[i] = y[i].min(y[i - 1]);
        }
        let base: Vec<f64> = y.iter().map(|v| v.floor()).collect();
        let frac: Vec<f64> = y.iter().zip(&base).map(|(v, b)| v - b).collect();
        let mut order: Vec<usize> = (1..n).collect();
        order.sort_by(|&i, &j| frac[j].total_cmp(&frac[i]).then(i.cmp(&j)));

        let mut vertex = base.clone();
        let mut stencil = Vec::with_capacity(n);
        let mut prev = 1.0;
        let push = |vertex: &[f64], w: f64, stencil: &mut Stencil| {
            if w > 0.0 {
                stencil.push((self.lookup_y(vertex), w));
            }
        };
        for &i in &order {
            push(&vertex, prev - frac[i], &mut stencil);
            prev = frac[i];
            vertex[i] += 1.0;
        }
        push(&vertex, prev, &mut stencil);
        stencil
    }

    fn lookup_y(&self, y: &[f64]) -> usize {
        let n = y.len();
        let c: Vec<u32> = (0..n)
            .map(|i| {
                let next = if i + 1 < n { y[i + 1] } else { 0.0 };
                (y[i] - next) as u32
            })
            .collect();
        *self.lookup.get(&c).expect("Freudenthal vertex lies on the lattice")
    }

    /// Interpolates a per-node quantity at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).iter().map(|&(i, w)| w * values[i]).sum()
    }
}

fn enumerate(current: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        enumerate(current, pos + 1, remaining - k, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn node_counts() {
        assert_eq!(BeliefGrid::new(1, 50).unwrap().len(), 1);
        assert_eq!(BeliefGrid::new(2, 101).unwrap().len(), 101);
        // C(m + n - 1, n - 1) with m = 4, n = 3
        assert_eq!(BeliefGrid::new(3, 5).unwrap().len(), 15);
        assert!(BeliefGrid::new(2, 1).is_err());
    }

    #[test]
    fn covers_vertices_and_nodes_distinct() {
        for n in 2..=4 {
            let g = BeliefGrid::new(n, 4).unwrap();
            for s in 0..n {
                let v = Belief::vertex(n, s);
                assert!(g.nodes().iter().any(|node| node == &v), "vertex {s} of {n}");
            }
            for i in 0..g.len() {
                for j in 0..i {
                    assert_ne!(g.node(i), g.node(j));
                }
            }
        }
    }

    #[test]
    fn nodes_interpolate_exactly() {
        for n in 1..=4 {
            let g = BeliefGrid::new(n, 6).unwrap();
            for (i, node) in g.nodes().iter().enumerate() {
                let st = g.stencil(node.probs());
                assert_eq!(st.len(), 1, "node {i} of n={n}: {st:?}");
                assert_eq!(st[0], (i, 1.0));
            }
        }
    }

    #[test]
    fn line_interpolation_midpoint() {
        let g = BeliefGrid::new(2, 11).unwrap();
        let st = g.stencil(&[0.35, 0.65]);
        assert_eq!(st.len(), 2);
        assert_eq!(st[0].0, 6);
        assert!((st[0].1 - 0.5).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn weights_reproduce_point(raw in proptest::collection::vec(0.0f64..1.0, 1..5), res in 2usize..9) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let n = raw.len();
            let x = Belief::normalized(raw);
            let g = BeliefGrid::new(n, res).unwrap();
            let st = g.stencil(x.probs());
            let total: f64 = st.iter().map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(st.iter().all(|&(_, w)| w >= 0.0));
            // affine functions are reproduced, so the barycenter is x itself
            for s in 0..n {
                let recon: f64 = st.iter().map(|&(i, w)| w * g.node(i).probs()[s]).sum();
                prop_assert!((recon - x.probs()[s]).abs() < 1e-12);
            }
        }
    }
}
