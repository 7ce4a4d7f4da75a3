use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, ParamId, Tape, ValueGrid};
use super::NetError;

/// Named parameter grids. Names are unique and shapes fixed once added.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    grids: Vec<ValueGrid>,
    index: HashMap<String, usize>,
    seed: u64,
}

/// Gradients aligned with a [`ParamStore`].
pub type ParamGrads = Vec<ValueGrid>;

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), grids: Vec::new(), index: HashMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, grid: ValueGrid) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{name}`");
        self.index.insert(name.to_string(), self.grids.len());
        self.names.push(name.to_string());
        self.grids.push(grid);
        ParamId(self.grids.len() - 1)
    }

    /// Glorot-uniform weights `U(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, ValueGrid::from_vec(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ValueGrid {
        &self.grids[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ValueGrid {
        &mut self.grids[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.grids.len()).map(ParamId)
    }

    pub fn grids(&self) -> &[ValueGrid] {
        &self.grids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.grids.iter().map(|g| g.data().len()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.grids.iter().map(|g| ValueGrid::zeros(g.rows(), g.cols())).collect()
    }

    /// Replaces every grid, checking names and shapes.
    pub fn assign(&mut self, names: &[String], grids: Vec<ValueGrid>) -> Result<(), NetError> {
        if names.len() != self.names.len() {
            return Err(NetError::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: [self.names.len(), 0],
                found: [names.len(), 0],
            });
        }
        for ((n, g), (own, cur)) in names.iter().zip(&grids).zip(self.names.iter().zip(&self.grids)) {
            if n != own || g.shape() != cur.shape() {
                return Err(NetError::ShapeMismatch { name: own.clone(), expected: cur.shape(), found: g.shape() });
            }
        }
        self.grids = grids;
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, g) in self.names.iter().zip(&self.grids) {
            h.update(n.as_bytes());
            h.update((g.rows() as u64).to_le_bytes());
            h.update((g.cols() as u64).to_le_bytes());
            for v in g.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adds `gradients` of every parameter leaf on `tape` into `into`.
pub fn collect_param_grads(tape: &Tape, gradients: &Gradients, into: &mut ParamGrads) {
    for (id, var) in tape.param_nodes() {
        if let Some(g) = gradients.get(var) {
            let dst = into[id.0].data_mut();
            for (d, v) in dst.iter_mut().zip(g.data()) {
                *d += v;
            }
        }
    }
}
