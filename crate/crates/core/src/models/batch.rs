use crate::data::schema::ROUND_TYPE;
use crate::data::{CompanyPanel, N_FEATURES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A stack of panels as flat `[B, T, K]` inputs, step mask and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub x: Vec<f64>,
    /// One flag per `(b, t)`; `false` marks padding.
    pub mask: Vec<bool>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn new(b: usize, t: usize, x: Vec<f64>, mask: Vec<bool>, labels: Vec<f64>) -> Result<Self> {
        if x.len() != b * t * N_FEATURES || mask.len() != b * t || labels.len() != b {
            return Err(Error::dim(format!(
                "batch {b}x{t}: {} values, {} mask flags, {} labels",
                x.len(),
                mask.len(),
                labels.len()
            )));
        }
        if b == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        Ok(Self { b, t, x, mask, labels })
    }

    pub fn from_panels<'p>(panels: impl IntoIterator<Item = &'p CompanyPanel>) -> Result<Self> {
        let (mut x, mut mask, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let mut t = None;
        for p in panels {
            if *t.get_or_insert(p.x.len()) != p.x.len() {
                return Err(Error::dim("panels of different lengths in one batch"));
            }
            for row in &p.x {
                x.extend_from_slice(row);
            }
            mask.extend_from_slice(&p.mask);
            labels.push(p.y as f64);
        }
        let b = labels.len();
        Batch::new(b, t.unwrap_or(0), x, mask, labels)
    }

    pub fn at(&self, b: usize, t: usize, k: usize) -> f64 {
        self.x[(b * self.t + t) * N_FEATURES + k]
    }

    /// Round-type ids, one per `(b, t)`.
    pub fn category_ids(&self, vocab_size: usize) -> Result<Vec<usize>> {
        self.x
            .chunks(N_FEATURES)
            .map(|row| {
                let v = row[ROUND_TYPE];
                if v < 0.0 || v.fract() != 0.0 || v >= vocab_size as f64 {
                    Err(Error::Vocabulary {
                        id: if v < 0.0 { usize::MAX } else { v as usize },
                        size: vocab_size,
                    })
                } else {
                    Ok(v as usize)
                }
            })
            .collect()
    }

    /// The numeric columns, `[B, T, K − 1]`.
    pub fn numeric(&self) -> Tensor {
        let data = self
            .x
            .chunks(N_FEATURES)
            .flat_map(|row| row.iter().enumerate().filter(|(k, _)| *k != ROUND_TYPE).map(|(_, &v)| v))
            .collect();
        Tensor::new(vec![self.b, self.t, N_FEATURES - 1], data).expect("shape")
    }

    /// One numeric column, `[B, T, 1]`.
    pub fn column(&self, k: usize) -> Tensor {
        let data = self.x.chunks(N_FEATURES).map(|row| row[k]).collect();
        Tensor::new(vec![self.b, self.t, 1], data).expect("shape")
    }

    /// Mask repeated `width` times per step, as 0/1 multipliers.
    pub fn step_multipliers(&self, width: usize) -> Vec<f64> {
        self.mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
            .collect()
    }
}
