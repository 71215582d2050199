//! The test-time transformation ensemble wrapper.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::transforms::{format_set, TransformSpec};

/// A base model evaluated on fixed transformed copies of its input, with the
/// raw scores averaged in member order.
///
/// The identity always comes first, so `EnsembleModel::wrap(m, vec![])`
/// behaves exactly like `m`. The base model is never modified.
#[derive(Clone, Debug)]
pub struct EnsembleModel<M> {
    base: M,
    members: Vec<TransformSpec>,
}

impl<M: Model> EnsembleModel<M> {
    pub fn wrap(base: M, transforms: Vec<TransformSpec>) -> Self {
        let mut members = Vec::with_capacity(transforms.len() + 1);
        members.push(TransformSpec::Identity);
        members.extend(transforms);
        Self { base, members }
    }

    pub fn base(&self) -> &M {
        &self.base
    }

    /// All members, identity first.
    pub fn members(&self) -> &[TransformSpec] {
        &self.members
    }

    /// The transforms passed to [`EnsembleModel::wrap`] (identity excluded).
    pub fn transforms(&self) -> &[TransformSpec] {
        &self.members[1..]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Manifest serialisation of the user-supplied transforms.
    pub fn describe(&self) -> String {
        format_set(self.transforms())
    }

    /// Scores of each member separately, in member order.
    pub fn member_scores(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.members
            .iter()
            .map(|t| self.base.scores(&t.apply_tensor(x)?))
            .collect()
    }
}

impl<M: Model> Model for EnsembleModel<M> {
    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let mut total: Option<Var<'t>> = None;
        for t in &self.members {
            let s = self.base.forward(tape, t.apply(tape, x)?)?;
            total = Some(match total {
                None => s,
                Some(acc) => acc.add(s)?,
            });
        }
        let total = total.expect("ensemble has at least the identity member");
        if self.members.len() == 1 {
            return Ok(total);
        }
        total.scale(1.0 / self.members.len() as f64)
    }
}

/// A base model that only ever sees one fixed transform of its input.
#[derive(Clone, Debug)]
pub struct Transformed<M> {
    base: M,
    transform: TransformSpec,
}

impl<M: Model> Transformed<M> {
    pub fn new(base: M, transform: TransformSpec) -> Result<Self> {
        transform.validate()?;
        Ok(Self { base, transform })
    }

    pub fn transform(&self) -> TransformSpec {
        self.transform
    }
}

impl<M: Model> Model for Transformed<M> {
    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let y = self.transform.apply(tape, x)?;
        if y.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "Transformed::forward",
                left: shape,
                right: y.shape(),
            });
        }
        self.base.forward(tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Classifier, Linear, ScoreOnly};
    use crate::transforms::named_set;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 1, 16, 16], |_| rng.random::<f64>())
    }

    fn net() -> Classifier {
        Classifier::init(Architecture::new(1, 16, 16, 4), 5).unwrap()
    }

    #[test]
    fn identity_wrapper_is_bitwise_base() {
        let m = net();
        let x = images(5, 1);
        let e = EnsembleModel::wrap(&m, vec![]);
        assert_eq!(e.len(), 1);
        assert!(e.scores(&x).unwrap().bitwise_eq(&m.scores(&x).unwrap()));
        assert_eq!(e.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn member_counts() {
        let m = net();
        assert_eq!(EnsembleModel::wrap(&m, vec![TransformSpec::Flip]).len(), 2);
        let full = named_set("flip+4crops+4flipped", 4, 0).unwrap();
        let e = EnsembleModel::wrap(&m, full);
        assert_eq!(e.len(), 10);
        assert_eq!(e.members()[0], TransformSpec::Identity);
    }

    #[test]
    fn constant_members_average_to_constant() {
        let c = [0.25, -1.0, 3.5];
        let m = Linear::new(
            Tensor::zeros(&[256, 3]),
            Tensor::new(vec![3], c.to_vec()).unwrap(),
        )
        .unwrap();
        let e = EnsembleModel::wrap(&m, vec![TransformSpec::Flip, TransformSpec::pad_crop(0, 1, 1).unwrap()]);
        let s = e.scores(&images(2, 2)).unwrap();
        for (got, want) in s.data().iter().zip(c.repeat(2)) {
            assert!((got - want).abs() < 1e-15);
        }
        // score-only bases cannot be differentiated through the wrapper
        let blind = ScoreOnly::new(3, |x: &Tensor| Ok(Tensor::zeros(&[x.shape()[0], 3])));
        assert!(EnsembleModel::wrap(&blind, vec![]).scores(&images(1, 2)).is_err());
    }

    #[test]
    fn two_members_average() {
        let m = net();
        let x = images(3, 3);
        let e = EnsembleModel::wrap(&m, vec![TransformSpec::Flip]);
        let s1 = m.scores(&x).unwrap();
        let s2 = m.scores(&TransformSpec::Flip.apply_tensor(&x).unwrap()).unwrap();
        let got = e.scores(&x).unwrap();
        for i in 0..got.len() {
            assert_eq!(got.data()[i], (s1.data()[i] + s2.data()[i]) / 2.0);
        }
    }

    #[test]
    fn mean_of_members_matches_forward() {
        let m = net();
        let x = images(4, 4);
        let e = EnsembleModel::wrap(&m, named_set("flip+2crops+2flipped", 4, 1).unwrap());
        let members = e.member_scores(&x).unwrap();
        let got = e.scores(&x).unwrap();
        for i in 0..got.len() {
            let mean = members.iter().map(|s| s.data()[i]).sum::<f64>() / members.len() as f64;
            assert!((got.data()[i] - mean).abs() < 1e-12);
        }
        assert!(got.bitwise_eq(&e.scores(&x).unwrap()));
    }

    #[test]
    fn transformed_centre_crop_is_base() {
        let m = net();
        let x = images(2, 6);
        let t = Transformed::new(&m, TransformSpec::pad_crop(4, 4, 4).unwrap()).unwrap();
        assert!(t.scores(&x).unwrap().bitwise_eq(&m.scores(&x).unwrap()));
    }
}
