use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Image log-density term. Strength is applied by the synthesizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorModel {
    None,
    /// Negated total squared forward difference along x and y.
    #[default]
    Smoothness,
}

impl PriorModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PriorModel::None),
            "smoothness" | "smooth" => Some(PriorModel::Smoothness),
            _ => None,
        }
    }

    /// Sum of log P over a [B,C,H,W] batch, as a graph scalar.
    pub fn log_prob_batch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("log_prob", format!("expected [B,C,H,W], got {s:?}"));
        }
        match self {
            PriorModel::None => Ok(g.constant(Tensor::scalar(0.0))),
            PriorModel::Smoothness => {
                let (h, w) = (s[2], s[3]);
                let mut total = g.constant(Tensor::scalar(0.0));
                if w > 1 {
                    let a = g.crop(x, 0, 1, h, w - 1)?;
                    let b = g.crop(x, 0, 0, h, w - 1)?;
                    let d = g.sub(a, b)?;
                    let sq = g.square(d);
                    let s = g.sum(sq);
                    total = g.add(total, s)?;
                }
                if h > 1 {
                    let a = g.crop(x, 1, 0, h - 1, w)?;
                    let b = g.crop(x, 0, 0, h - 1, w)?;
                    let d = g.sub(a, b)?;
                    let sq = g.square(d);
                    let s = g.sum(sq);
                    total = g.add(total, s)?;
                }
                Ok(g.scale(total, -1.0))
            }
        }
    }

    /// log P of one [C,H,W] image, up to a constant.
    pub fn log_prob(&self, image: &Tensor) -> Result<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::new();
        let x = g.constant(image.reshape(&shape)?);
        let v = self.log_prob_batch(&mut g, x)?;
        Ok(g.value(v).item())
    }
}
