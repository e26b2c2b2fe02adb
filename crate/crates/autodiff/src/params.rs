//! Flat parameter storage with a named layout.
//!
//! All trainable scalars live in one contiguous array so optimizers and
//! gradient buffers can be plain `Vec<f64>` aligned by offset.

use crate::error::AdError;

/// A view into the parameter array: `shape = (rows, cols)`, row-major.
/// Vectors are stored as `(len, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    r: ParamRef,
}

/// Append-only store of named parameter blocks over one flat array.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    values: Vec<f64>,
    layout: Vec<Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve a named `(rows, cols)` block initialized to zero.
    pub fn alloc(&mut self, name: &str, rows: usize, cols: usize) -> ParamRef {
        let r = ParamRef {
            offset: self.values.len(),
            rows,
            cols,
        };
        self.values.resize(r.offset + rows * cols, 0.0);
        self.layout.push(Entry {
            name: name.to_string(),
            r,
        });
        r
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, r: ParamRef) -> &[f64] {
        &self.values[r.offset..r.offset + r.len()]
    }

    pub fn slice_mut(&mut self, r: ParamRef) -> &mut [f64] {
        let n = r.len();
        &mut self.values[r.offset..r.offset + n]
    }

    /// Named blocks in allocation order as `(name, ref)`.
    pub fn layout(&self) -> impl Iterator<Item = (&str, ParamRef)> {
        self.layout.iter().map(|e| (e.name.as_str(), e.r))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamRef> {
        self.layout.iter().find(|e| e.name == name).map(|e| e.r)
    }

    /// Verify the layout tiles the array exactly and all values are finite.
    pub fn validate(&self) -> Result<(), AdError> {
        let mut expect = 0usize;
        for e in &self.layout {
            if e.r.offset != expect {
                return Err(AdError::LayoutGap {
                    name: e.name.clone(),
                    offset: e.r.offset,
                    expected: expect,
                });
            }
            expect += e.r.len();
        }
        if expect != self.values.len() {
            return Err(AdError::LayoutGap {
                name: "<end>".to_string(),
                offset: self.values.len(),
                expected: expect,
            });
        }
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(AdError::NonFiniteParam { index: i });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_validated() {
        let mut p = ParameterStore::new();
        let a = p.alloc("a", 2, 3);
        let b = p.alloc("b", 4, 1);
        assert_eq!(a.offset, 0);
        assert_eq!(b.offset, 6);
        assert_eq!(p.len(), 10);
        p.validate().unwrap();
        p.values_mut()[3] = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn lookup_finds_named_blocks() {
        let mut p = ParameterStore::new();
        p.alloc("w", 3, 3);
        let b = p.alloc("b", 3, 1);
        assert_eq!(p.lookup("b"), Some(b));
        assert_eq!(p.lookup("nope"), None);
    }
}
