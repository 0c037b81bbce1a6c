//! Embedding plus CNN encoder: the sentence feature extractor shared by the
//! candidate search network and the matching network.

use crate::corpus::Token;
use crate::embed::{EmbeddedSentence, Embedder};
use crate::encoder::{CnnEncoder, EncodeCache, SentenceVector};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, ParamTree};

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub embedder: Embedder<T>,
    pub encoder: CnnEncoder<T>,
}

pub struct BackboneTrace<T> {
    pub embedded: EmbeddedSentence<T>,
    pub cache: EncodeCache<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn features(&self, question: &[Token]) -> Result<SentenceVector<T>> {
        let embedded = self.embedder.embed(question)?;
        self.encoder.encode(&embedded)
    }

    pub fn forward(&self, question: &[Token]) -> Result<(SentenceVector<T>, BackboneTrace<T>)> {
        let embedded = self.embedder.embed(question)?;
        let (v, cache) = self.encoder.forward(&embedded)?;
        Ok((v, BackboneTrace { embedded, cache }))
    }

    pub fn backward(&self, question: &[Token], trace: &BackboneTrace<T>, d_out: &[T], grad: &mut Self) {
        let d_rows: Matrix<T> = self
            .encoder
            .backward(&trace.embedded, &trace.cache, d_out, &mut grad.encoder);
        self.embedder.backward(question, &d_rows, &mut grad.embedder);
    }

    pub fn output_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

impl<T: Scalar> ParamTree<T> for Backbone<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.embedder.tensors();
        out.extend(self.encoder.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = self.embedder.tensors_mut();
        out.extend(self.encoder.tensors_mut());
        out
    }
}
