use rand::Rng as _;

use crate::error::Result;
use crate::rng::{rng_for, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, path: u64) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &[stream::HEADS, path]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("head weight shape")
}

/// The regressor `r` mapping student features onto the teacher's: a 1×1
/// convolution for spatial features, a linear layer otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct HintHead<T: Scalar = f32> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    spatial: bool,
}

impl<T: Scalar> HintHead<T> {
    pub fn new(in_features: usize, out_features: usize, spatial: bool, seed: u64) -> Self {
        let shape = if spatial {
            vec![out_features, in_features, 1, 1]
        } else {
            vec![out_features, in_features]
        };
        HintHead {
            weight: he_uniform(&shape, in_features, seed, 0),
            bias: Tensor::zeros([out_features]),
            spatial,
        }
    }

    /// `r(f) = f`.
    pub fn identity(features: usize, spatial: bool) -> Self {
        let mut head = Self::new(features, features, spatial, 0);
        for (i, w) in head.weight.data_mut().iter_mut().enumerate() {
            *w = if i % (features + 1) == 0 { T::one() } else { T::zero() };
        }
        head
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundHintHead<'t, T> {
        BoundHintHead {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
            spatial: self.spatial,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub struct BoundHintHead<'t, T: Scalar> {
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    spatial: bool,
}

impl<'t, T: Scalar> BoundHintHead<'t, T> {
    pub fn from_vars(weight: Var<'t, T>, bias: Var<'t, T>, spatial: bool) -> Self {
        BoundHintHead { weight, bias, spatial }
    }

    pub fn apply(&self, features: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.spatial {
            features.conv2d(self.weight, Some(self.bias), 1, 0)
        } else {
            features.matmul_t(self.weight)?.add_bias(self.bias)
        }
    }

    pub fn vars(&self) -> [Var<'t, T>; 2] {
        [self.weight, self.bias]
    }
}

/// Linear projections of student and teacher penultimate features to a
/// shared embedding size, each followed by L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CrdHeads<T: Scalar = f32> {
    student_w: Tensor<T>,
    student_b: Tensor<T>,
    teacher_w: Tensor<T>,
    teacher_b: Tensor<T>,
}

impl<T: Scalar> CrdHeads<T> {
    pub fn new(student_dim: usize, teacher_dim: usize, embed_dim: usize, seed: u64) -> Self {
        CrdHeads {
            student_w: he_uniform(&[embed_dim, student_dim], student_dim, seed, 1),
            student_b: Tensor::zeros([embed_dim]),
            teacher_w: he_uniform(&[embed_dim, teacher_dim], teacher_dim, seed, 2),
            teacher_b: Tensor::zeros([embed_dim]),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundCrdHeads<'t, T> {
        let leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        BoundCrdHeads {
            student: [leaf(&self.student_w), leaf(&self.student_b)],
            teacher: [leaf(&self.teacher_w), leaf(&self.teacher_b)],
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.student_w,
            &mut self.student_b,
            &mut self.teacher_w,
            &mut self.teacher_b,
        ]
    }
}

pub struct BoundCrdHeads<'t, T: Scalar> {
    student: [Var<'t, T>; 2],
    teacher: [Var<'t, T>; 2],
}

impl<'t, T: Scalar> BoundCrdHeads<'t, T> {
    fn embed(p: &[Var<'t, T>; 2], features: Var<'t, T>) -> Result<Var<'t, T>> {
        features.matmul_t(p[0])?.add_bias(p[1])?.l2_normalize_rows()
    }

    pub fn embed_student(&self, features: Var<'t, T>) -> Result<Var<'t, T>> {
        Self::embed(&self.student, features)
    }

    pub fn embed_teacher(&self, features: Var<'t, T>) -> Result<Var<'t, T>> {
        Self::embed(&self.teacher, features)
    }

    pub fn vars(&self) -> [Var<'t, T>; 4] {
        [self.student[0], self.student[1], self.teacher[0], self.teacher[1]]
    }
}
