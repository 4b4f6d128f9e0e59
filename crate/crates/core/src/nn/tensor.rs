use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense batch of feature grids in `[batch, channels, height, width]` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copy of the samples in `range`.
    pub fn narrow(&self, range: Range<usize>) -> Self {
        let len = self.sample_len();
        Self {
            n: range.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[range.start * len..range.end * len].to_vec(),
        }
    }

    /// Adds `part` into the leading `part.batch()` samples of `self`.
    pub fn add_leading(&mut self, part: &Tensor<T>) {
        debug_assert_eq!(part.sample_len(), self.sample_len());
        for (a, &b) in self.data.iter_mut().zip(&part.data) {
            *a = *a + b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|v| *v = *v * k);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Self {
            n: a.n,
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `first` channels and the rest.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let plane = self.plane();
        let (la, lb) = (first * plane, (self.c - first) * plane);
        let mut a = Vec::with_capacity(self.n * la);
        let mut b = Vec::with_capacity(self.n * lb);
        for i in 0..self.n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..la]);
            b.extend_from_slice(&s[la..]);
        }
        (
            Self {
                n: self.n,
                c: first,
                h: self.h,
                w: self.w,
                data: a,
            },
            Self {
                n: self.n,
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: b,
            },
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}
