use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::matmul_t;
use super::{AdamState, DiffError, Gradients, Tensor, TrainConfig, Var};

const FRAGMENT_MAGIC: &[u8; 4] = b"NNSB";
const FRAGMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.relu(),
            Activation::Identity => v,
        }
    }

    fn apply_in_place(self, data: &mut [f64]) {
        match self {
            Activation::Tanh => data.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => data.iter_mut().for_each(|x| {
                if *x <= 0.0 {
                    *x = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

/// Affine map `y = act(x·Wᵀ + b)` with `W` stored `out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self, DiffError> {
        if weight.shape().len() != 2 {
            return Err(DiffError::Shape(format!("layer weight must be a matrix, got {:?}", weight.shape())));
        }
        if bias.len() != weight.rows() {
            return Err(DiffError::Shape(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multi-layer perceptron with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    optimizer: AdamState,
}

/// An [`Mlp`] forward pass recorded on a tape.
pub struct MlpRun<'t> {
    output: Var<'t>,
    params: Vec<Var<'t>>,
}

impl<'t> MlpRun<'t> {
    pub fn output(&self) -> Var<'t> {
        self.output
    }

    /// Parameter gradients in `Mlp::parameters` order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| grads.get_or_zeros(*p)).collect()
    }
}

impl Mlp {
    /// Random network with layer widths `dims`; `hidden` applies to every
    /// layer but the last, which uses `output`. Xavier-uniform init for tanh
    /// and identity layers, He-uniform for relu, zero biases.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let act = if k + 2 == dims.len() { output } else { hidden };
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_out, fan_in, w),
                bias: Tensor::vector(vec![0.0; fan_out]),
                activation: act,
            });
        }
        Self::from_layers(layers).expect("widths chain by construction")
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, DiffError> {
        if layers.is_empty() {
            return Err(DiffError::Shape("an MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(DiffError::Shape(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let lens: Vec<usize> = layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
        Ok(Self { layers, optimizer: AdamState::new(&lens) })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter buffers as `[w0, b0, w1, b1, ...]`.
    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.data()]).collect()
    }

    fn check_input(&self, shape: &[usize], cols: usize) -> Result<(), DiffError> {
        if shape.len() != 2 || cols != self.in_dim() {
            return Err(DiffError::Shape(format!(
                "MLP expects [batch, {}] input, got {:?}",
                self.in_dim(),
                shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `x`'s tape.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<MlpRun<'t>, DiffError> {
        let shape = x.shape();
        self.check_input(&shape, shape.get(1).copied().unwrap_or(0))?;
        let tape = x.tape();
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.push(w);
            params.push(b);
            h = layer.activation.apply(h.matmul_t(w).add_row(b));
        }
        Ok(MlpRun { output: h, params })
    }

    /// Forward pass without recording. Produces the same values as
    /// [`Mlp::forward`] bit for bit.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        self.check_input(x.shape(), x.cols())?;
        let mut rows = x.rows();
        let mut h = x.data().to_vec();
        let mut width = x.cols();
        for layer in &self.layers {
            let out = layer.out_dim();
            let mut next = matmul_t(&h, rows, width, layer.weight.data(), out);
            for row in next.chunks_exact_mut(out) {
                row.iter_mut().zip(layer.bias.data()).for_each(|(x, b)| *x += b);
            }
            layer.activation.apply_in_place(&mut next);
            h = next;
            width = out;
            rows = h.len() / width;
        }
        Ok(Tensor::matrix(rows, width, h))
    }

    /// Applies one Adam step with gradients in `parameters()` order.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], cfg: &TrainConfig) -> Result<(), DiffError> {
        let mut params: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
            .collect();
        self.optimizer.update(&mut params, grads, cfg)
    }

    /// Serializes the layers (not the optimizer state).
    pub fn to_fragment(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FRAGMENT_MAGIC);
        out.extend_from_slice(&FRAGMENT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
            out.push(layer.activation.tag());
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a fragment written by [`Mlp::to_fragment`]. The whole slice
    /// must be consumed.
    pub fn from_fragment(bytes: &[u8]) -> Result<Self, DiffError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FRAGMENT_MAGIC {
            return Err(DiffError::Fragment("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FRAGMENT_VERSION {
            return Err(DiffError::Fragment(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for k in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(DiffError::Fragment(format!("layer {k} has a zero dimension")));
            }
            let tag = r.take(1)?[0];
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| DiffError::Fragment(format!("layer {k}: unknown activation tag {tag}")))?;
            let weights = r.f64s(rows * cols)?;
            let biases = r.f64s(rows)?;
            layers.push(Layer {
                weight: Tensor::matrix(rows, cols, weights),
                bias: Tensor::vector(biases),
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(DiffError::Fragment(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_layers(layers)
    }

    /// SHA-256 of the serialized layers, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_fragment());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DiffError::Fragment(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DiffError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DiffError::Fragment("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize, bias: Vec<f64>) -> Layer {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Layer::new(Tensor::matrix(n, n, w), Tensor::vector(bias), Activation::Identity).unwrap()
    }

    #[test]
    fn zero_weights_emit_bias() {
        let layer = Layer::new(
            Tensor::zeros(vec![2, 3]),
            Tensor::vector(vec![0.5, -1.0]),
            Activation::Identity,
        )
        .unwrap();
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let y = mlp.predict(&x).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp::from_layers(vec![identity_layer(3, vec![0.0; 3])]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn layer_dimensions_must_chain() {
        let a = Layer::new(Tensor::zeros(vec![4, 2]), Tensor::zeros(vec![4]), Activation::Tanh).unwrap();
        let b = Layer::new(Tensor::zeros(vec![1, 3]), Tensor::zeros(vec![1]), Activation::Identity).unwrap();
        assert!(Mlp::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn input_width_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 4, 1], Activation::Tanh, Activation::Identity, &mut rng);
        assert!(mlp.predict(&Tensor::matrix(1, 2, vec![0.0, 0.0])).is_err());
        let tape = Tape::new();
        assert!(mlp.forward(tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]))).is_err());
    }

    #[test]
    fn predict_matches_recorded_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&[5, 8, 8, 3], Activation::Relu, Activation::Tanh, &mut rng);
        let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect());
        let tape = Tape::new();
        let run = mlp.forward(tape.leaf(x.clone())).unwrap();
        assert_eq!(run.output().value(), mlp.predict(&x).unwrap());
    }

    #[test]
    fn fragment_layout() {
        let layer = Layer::new(
            Tensor::matrix(1, 2, vec![1.0, 2.0]),
            Tensor::vector(vec![3.0]),
            Activation::Relu,
        )
        .unwrap();
        let bytes = Mlp::from_layers(vec![layer]).unwrap().to_fragment();
        assert_eq!(&bytes[0..4], b"NNSB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(bytes[20], 1);
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[37..45], &3.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn fragment_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).to_fragment();
        assert!(Mlp::from_fragment(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Mlp::from_fragment(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Mlp::from_fragment(&extra).is_err());
        let mut tag = bytes;
        tag[20] = 9;
        assert!(Mlp::from_fragment(&tag).is_err());
    }
}
