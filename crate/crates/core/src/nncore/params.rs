use std::ops::Index;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-sparse parameters only receive gradients on rows that were touched;
    /// the optimizer updates exactly those rows.
    pub row_sparse: bool,
    pub frozen: bool,
}

impl ParamMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn row_width(&self) -> usize {
        self.shape.get(1..).map_or(1, |s| s.iter().product())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values(Vec<Vec<f64>>);

impl Values {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }
    pub fn row(&self, id: ParamId, width: usize, row: usize) -> &[f64] {
        &self.0[id.0][row * width..(row + 1) * width]
    }
}

impl Index<ParamId> for Values {
    type Output = [f64];
    fn index(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RowTracker {
    touched: Vec<bool>,
    rows: Vec<usize>,
}

/// Gradient accumulators, one per parameter and of identical shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
    widths: Vec<usize>,
    trackers: Vec<Option<RowTracker>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    /// Mutable access to a dense parameter's whole gradient.
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        debug_assert!(self.trackers[id.0].is_none(), "use row_mut for row-sparse params");
        &mut self.data[id.0]
    }

    /// Two distinct dense parameters' gradients at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.data.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.data.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    /// Mutable access to one row; marks the row as touched for row-sparse params.
    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        let w = self.widths[id.0];
        if let Some(t) = self.trackers[id.0].as_mut() {
            if !t.touched[row] {
                t.touched[row] = true;
                t.rows.push(row);
            }
        }
        &mut self.data[id.0][row * w..(row + 1) * w]
    }

    /// Touched rows of a row-sparse parameter (all rows for dense ones).
    pub fn touched_rows(&self, id: ParamId) -> Vec<usize> {
        match &self.trackers[id.0] {
            Some(t) => {
                let mut r = t.rows.clone();
                r.sort_unstable();
                r
            }
            None => (0..self.data[id.0].len() / self.widths[id.0].max(1)).collect(),
        }
    }

    fn zero(&mut self, idx: usize) {
        let w = self.widths[idx];
        match self.trackers[idx].as_mut() {
            Some(t) => {
                for &r in &t.rows {
                    self.data[idx][r * w..(r + 1) * w].fill(0.0);
                    t.touched[r] = false;
                }
                t.rows.clear();
            }
            None => self.data[idx].fill(0.0),
        }
    }
}

/// Named parameter arrays with matching gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    meta: Vec<ParamMeta>,
    values: Values,
    grads: Grads,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> ParamId {
        self.push(name.into(), shape, init, false)
    }

    /// Adds an embedding-style table whose gradients are tracked per row.
    pub fn add_row_sparse(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> ParamId {
        self.push(name.into(), shape, init, true)
    }

    fn push(&mut self, name: String, shape: &[usize], init: Vec<f64>, row_sparse: bool) -> ParamId {
        let meta = ParamMeta {
            name,
            shape: shape.to_vec(),
            row_sparse,
            frozen: false,
        };
        assert_eq!(meta.len(), init.len(), "initial values for `{}` do not match shape", meta.name);
        assert!(self.find(&meta.name).is_none(), "duplicate parameter `{}`", meta.name);
        let width = meta.row_width();
        let rows = if width == 0 { 0 } else { init.len() / width };
        self.grads.data.push(vec![0.0; init.len()]);
        self.grads.widths.push(width);
        self.grads.trackers.push(row_sparse.then(|| RowTracker {
            touched: vec![false; rows],
            rows: Vec::new(),
        }));
        self.values.0.push(init);
        self.meta.push(meta);
        ParamId(self.meta.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }
    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.meta.len()).map(ParamId)
    }
    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.meta.iter().position(|m| m.name == name).map(ParamId)
    }
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.meta[id.0].frozen = frozen;
    }

    pub fn values(&self) -> &Values {
        &self.values
    }
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values.0[id.0]
    }
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values.0[id.0]
    }
    pub fn grads(&self) -> &Grads {
        &self.grads
    }
    pub fn grads_mut(&mut self) -> &mut Grads {
        &mut self.grads
    }

    /// Disjoint borrows: read values while accumulating gradients.
    pub fn split_mut(&mut self) -> (&Values, &mut Grads) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        for idx in 0..self.meta.len() {
            self.grads.zero(idx);
        }
    }

    /// Projects a parameter onto `[min, ∞)` elementwise.
    pub fn clamp_min(&mut self, id: ParamId, min: f64) {
        for v in &mut self.values.0[id.0] {
            if *v < min {
                *v = min;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.meta.iter().map(ParamMeta::len).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::encoder::Fnv1a::new();
        for (m, v) in self.meta.iter().zip(&self.values.0) {
            h.write(m.name.as_bytes());
            for &d in &m.shape {
                h.write(&(d as u64).to_le_bytes());
            }
            for x in v {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Overwrites values from named arrays; every parameter must be present with its shape.
    pub fn load_named(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (idx, m) in self.meta.iter().enumerate() {
            let (_, shape, data) = arrays
                .iter()
                .find(|(n, _, _)| *n == m.name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter `{}`", m.name)))?;
            if *shape != m.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    m.name, m.shape, shape
                )));
            }
            self.values.0[idx].copy_from_slice(data);
        }
        Ok(())
    }

    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.meta
            .iter()
            .zip(&self.values.0)
            .map(|(m, v)| (m.name.clone(), m.shape.clone(), v.clone()))
            .collect()
    }

    pub fn snapshot(&self) -> Values {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &Values) {
        assert_eq!(snapshot.0.len(), self.values.0.len());
        self.values.0.clone_from(&snapshot.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sparse_tracking_and_zeroing() {
        let mut s = ParamStore::new();
        let t = s.add_row_sparse("table", &[4, 2], vec![0.0; 8]);
        let d = s.add("dense", &[3], vec![1.0; 3]);
        s.grads_mut().row_mut(t, 2)[1] = 5.0;
        s.grads_mut().row_mut(t, 0)[0] = 1.0;
        s.grads_mut().get_mut(d)[0] = 2.0;
        assert_eq!(s.grads().touched_rows(t), vec![0, 2]);
        s.zero_grads();
        assert!(s.grads().get(t).iter().all(|&g| g == 0.0));
        assert!(s.grads().get(d).iter().all(|&g| g == 0.0));
        assert!(s.grads().touched_rows(t).is_empty());
    }

    #[test]
    fn checksum_sees_every_bit() {
        let mut s = ParamStore::new();
        let p = s.add("p", &[2], vec![1.0, 2.0]);
        let before = s.checksum();
        s.value_mut(p)[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(before, s.checksum());
    }
}
