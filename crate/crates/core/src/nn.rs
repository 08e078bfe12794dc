//! Small parameterised building blocks shared by every network in the crate.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Grid dimensions of a token map (`H·W` rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Normal initialisation with standard deviation `1/sqrt(fan_in)`.
pub fn init_normal<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Tokenwise affine map `x·W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}/w"), init_normal(fan_in, fan_out, fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}/b"), Tensor::zeros(1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Two-layer perceptron with a GELU hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}/l1"), fan_in, hidden, bias, rng),
            l2: Linear::new(store, &format!("{name}/l2"), hidden, fan_out, bias, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.l1.ids();
        v.extend(self.l2.ids());
        v
    }
}

/// Zero-padded 3×3 convolution on a token map.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub lin: Linear,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self { lin: Linear::new(store, name, 9 * c_in, c_out, true, rng) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Var {
        let cols = g.im2col3(x, grid.h, grid.w);
        self.lin.forward(g, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_of_delta_reproduces_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 1, 1, &mut rng);
        let grid = Grid::new(5, 5);
        let mut x = Tensor::zeros(25, 1);
        x.set(12, 0, 1.0);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let y = conv.forward(&mut g, xv, grid);
        let k = store.get(conv.lin.w);
        // output at (2+di, 2+dj) picks the kernel tap facing the impulse
        for di in 0..3 {
            for dj in 0..3 {
                let out = g.value(y).get((1 + di) * 5 + (1 + dj), 0);
                let tap = k.get((2 - di) * 3 + (2 - dj), 0);
                assert!((out - tap).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 4, 2, true, &mut rng);
        let x = Tensor::randn(3, 4, 1.0, &mut rng);
        let ids = mlp.ids();
        let (err, name) = GradCheck::default().params(&mut store, &ids, |g| {
            let xv = g.constant(x.clone());
            mlp.forward(g, xv)
        });
        assert!(err < 1e-6, "{name}: {err}");
    }
}
