//! Tiny episodes whose meta gradients can be worked out by hand or by
//! finite differences.

use feddg::episodic::{Episode, MetaTerms};
use feddg::tape::{BoundParams, ParamSet, Tape, Tensor, Var};
use feddg::Result;

/// `L = θ²` in both phases.
pub struct Quadratic;

impl Episode<f64> for Quadratic {
    fn train_loss(&self, tape: &mut Tape<f64>, params: &BoundParams) -> Result<Var> {
        let sq = tape.mul(params.get(0), params.get(0))?;
        Ok(tape.sum(sq))
    }

    fn meta_loss(&self, tape: &mut Tape<f64>, params: &BoundParams, _gamma: f64) -> Result<MetaTerms> {
        let seg = self.train_loss(tape, params)?;
        Ok(MetaTerms {
            seg,
            boundary: None,
            total: seg,
        })
    }
}

pub fn scalar_theta(value: f64) -> ParamSet<f64> {
    ParamSet::new(vec![("theta".into(), Tensor::new(vec![1], vec![value]).unwrap())]).unwrap()
}

/// Two-layer regressor with 20 parameters on fixed inputs. The meta phase
/// sees shifted inputs and adds a cosine alignment term.
pub struct SmallNet {
    x: Tensor<f64>,
    t: Tensor<f64>,
    y: Tensor<f64>,
}

impl SmallNet {
    pub fn new() -> Self {
        let mut r = super::rng(31);
        let x = super::random_tensor(&mut r, &[4, 3], -1.0, 1.0);
        let mut t = x.clone();
        for v in t.data_mut() {
            *v = 1.3 * *v + 0.2;
        }
        let y = super::random_tensor(&mut r, &[4, 2], 0.0, 1.0);
        Self { x, t, y }
    }

    pub fn params() -> ParamSet<f64> {
        let mut r = super::rng(32);
        ParamSet::new(vec![
            ("w1".into(), super::random_tensor(&mut r, &[3, 4], -0.8, 0.8)),
            ("w2".into(), super::random_tensor(&mut r, &[4, 2], -0.8, 0.8)),
        ])
        .unwrap()
    }

    fn loss(&self, tape: &mut Tape<f64>, params: &BoundParams, input: &Tensor<f64>) -> Result<(Var, Var)> {
        let x = tape.constant(input.clone());
        let h = tape.matmul(x, params.get(0))?;
        let h = tape.sigmoid(h);
        let out = tape.matmul(h, params.get(1))?;
        let out = tape.sigmoid(out);
        let y = tape.constant(self.y.clone());
        let diff = tape.sub(out, y)?;
        let sq = tape.mul(diff, diff)?;
        Ok((tape.mean(sq), h))
    }
}

impl Episode<f64> for SmallNet {
    fn train_loss(&self, tape: &mut Tape<f64>, params: &BoundParams) -> Result<Var> {
        Ok(self.loss(tape, params, &self.x)?.0)
    }

    fn meta_loss(&self, tape: &mut Tape<f64>, params: &BoundParams, gamma: f64) -> Result<MetaTerms> {
        let (seg, ht) = self.loss(tape, params, &self.t)?;
        let (_, hx) = self.loss(tape, params, &self.x)?;
        let (ft, fx) = (tape.reshape(ht, &[16])?, tape.reshape(hx, &[16])?);
        let cos = tape.cosine_similarity(ft, fx)?;
        let boundary = tape.scale(cos, -1.0);
        let weighted = tape.scale(boundary, gamma);
        let total = tape.add(seg, weighted)?;
        Ok(MetaTerms {
            seg,
            boundary: Some(boundary),
            total,
        })
    }
}
