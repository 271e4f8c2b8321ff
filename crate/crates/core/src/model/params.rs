use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngState, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub attn_norm: DenseMatrix<T>,
    pub wq: DenseMatrix<T>,
    pub wk: DenseMatrix<T>,
    pub wv: DenseMatrix<T>,
    pub wo: DenseMatrix<T>,
    pub mlp_norm: DenseMatrix<T>,
    pub w_up: DenseMatrix<T>,
    pub w_down: DenseMatrix<T>,
}

/// All trainable tensors of the toy transformer.
///
/// Declaration order (embedding, layers in order, final norm, output
/// projection) is the order used by [`Parameters::tensors`], the optimizer
/// and the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T = f32> {
    pub config: ModelConfig,
    pub embedding: DenseMatrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: DenseMatrix<T>,
    /// `None` when the output projection is tied to the embedding.
    pub output: Option<DenseMatrix<T>>,
}

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&DenseMatrix<T>; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DenseMatrix<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

fn gaussian<T: Scalar>(rng: &mut RngState, rows: usize, cols: usize, std: f64) -> DenseMatrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.normal() * std))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

impl<T: Scalar> Parameters<T> {
    /// Gaussian initialization with variance `1/fan_in` for projections,
    /// unit gains for norms and a small output projection so initial logits
    /// are near uniform.
    pub fn init(config: &ModelConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.mlp_hidden);
        let mut r = rng.split(0x1417);
        let embedding = gaussian(&mut r, v, d, 1.0);
        let proj = 1.0 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: DenseMatrix::filled(1, d, T::one()),
                wq: gaussian(&mut r, d, d, proj),
                wk: gaussian(&mut r, d, d, proj),
                wv: gaussian(&mut r, d, d, proj),
                wo: gaussian(&mut r, d, d, proj),
                mlp_norm: DenseMatrix::filled(1, d, T::one()),
                w_up: gaussian(&mut r, d, f, proj),
                w_down: gaussian(&mut r, f, d, 1.0 / (f as f64).sqrt()),
            })
            .collect();
        let output = (!config.tie_embeddings).then(|| gaussian(&mut r, d, v, 1.0 / d as f64));
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm: DenseMatrix::filled(1, d, T::one()),
            output,
        })
    }

    /// Same shapes, all zeros; used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix<T>| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            config: self.config.clone(),
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            output: self.output.as_ref().map(z),
        }
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix<T>> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.final_norm);
        if let Some(o) = &self.output {
            v.push(o);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<T>> {
        let mut v = vec![&mut self.embedding];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.final_norm);
        if let Some(o) = &mut self.output {
            v.push(o);
        }
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrite every tensor from a flat vector in declaration order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            output: self.output.as_ref().map(DenseMatrix::cast),
        }
    }
}
