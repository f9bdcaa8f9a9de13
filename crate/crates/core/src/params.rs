//! Flat storage for every trainable scalar with gradient and Adam moment
//! slots.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Signal,
    Opacity,
    Rotation,
    Scale,
    Network,
    Calibration,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Position,
        ParamGroup::Signal,
        ParamGroup::Opacity,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Network,
        ParamGroup::Calibration,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// A `rows x cols` row-major block. Per-Gaussian attributes have one row
/// per Gaussian and follow densification; network weights do not.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    pub per_gaussian: bool,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.value[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        per_gaussian: bool,
        value: Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(value.len(), rows * cols, "parameter {name} has wrong length");
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = value.len();
        self.params.push(Param {
            name,
            rows,
            cols,
            group,
            per_gaussian,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Current number of Gaussians (rows of any per-Gaussian parameter).
    pub fn gaussian_count(&self) -> usize {
        self.params.iter().find(|p| p.per_gaussian).map_or(0, |p| p.rows)
    }

    /// Keeps only the Gaussians whose `keep` flag is set.
    pub fn retain_gaussians(&mut self, keep: &[bool]) {
        for p in self.params.iter_mut().filter(|p| p.per_gaussian) {
            assert_eq!(keep.len(), p.rows);
            let cols = p.cols;
            for buf in [&mut p.value, &mut p.grad, &mut p.m, &mut p.v] {
                let mut out = Vec::with_capacity(buf.len());
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        out.extend_from_slice(&buf[r * cols..(r + 1) * cols]);
                    }
                }
                *buf = out;
            }
            p.rows = keep.iter().filter(|&&k| k).count();
        }
    }

    /// Appends Gaussians; `rows` maps each per-Gaussian parameter name to the
    /// new rows' values. Moments and gradients of new rows start at zero.
    pub fn append_gaussians(&mut self, count: usize, mut values: impl FnMut(&str, usize) -> Vec<f64>) {
        for p in self.params.iter_mut().filter(|p| p.per_gaussian) {
            let cols = p.cols;
            for i in 0..count {
                let row = values(&p.name, i);
                assert_eq!(row.len(), cols, "row width for {}", p.name);
                p.value.extend_from_slice(&row);
            }
            p.grad.resize(p.value.len(), 0.0);
            p.m.resize(p.value.len(), 0.0);
            p.v.resize(p.value.len(), 0.0);
            p.rows += count;
        }
    }

    /// Scalar views used by gradient checks: `(param, index)` pairs in a
    /// stable order.
    pub fn scalar_at(&self, flat: usize) -> (ParamId, usize) {
        let mut rest = flat;
        for (i, p) in self.params.iter().enumerate() {
            if rest < p.len() {
                return (ParamId(i), rest);
            }
            rest -= p.len();
        }
        panic!("scalar index {flat} out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retain_and_append_rows() {
        let mut s = ParamStore::new();
        let a = s.add("mu", 3, 2, ParamGroup::Position, true, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = s.add("w", 1, 2, ParamGroup::Network, false, vec![9.0, 9.0]);
        s.get_mut(a).m = vec![1.0; 6];
        s.retain_gaussians(&[true, false, true]);
        assert_eq!(s.value(a), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(s.get(a).m, vec![1.0; 4]);
        s.append_gaussians(1, |_, _| vec![7.0, 8.0]);
        assert_eq!(s.get(a).rows, 3);
        assert_eq!(s.value(a), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(s.get(a).m[4..], [0.0, 0.0]);
        assert_eq!(s.value(w), &[9.0, 9.0]);
        assert_eq!(s.gaussian_count(), 3);
        assert_eq!(s.scalar_at(6), (w, 0));
    }
}
