use crate::tensor::{gaussian_kernel, Result, Tensor, Var};

/// Scale applied to raw maps before the spatial softmax.
pub const ATTENTION_SCALE: f64 = 100.0;
pub const SMOOTHING_SIZE: usize = 3;
pub const SMOOTHING_SIGMA: f64 = 0.5;

/// Raw per-entity maps, shape `[S, h, w]`, nonnegative.
#[derive(Clone, Copy)]
pub struct RawAttention<'g> {
    pub maps: Var<'g>,
}

/// Preprocessed maps, shape `[S, h, w]`; every map sums to one.
#[derive(Clone, Copy)]
pub struct Attention<'g> {
    maps: Var<'g>,
}

impl<'g> Attention<'g> {
    pub fn maps(&self) -> Var<'g> {
        self.maps
    }

    pub fn num_subjects(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Wrap maps that already satisfy the preprocessed contract. Intended for
    /// tests and for criteria evaluated on hand-built maps.
    pub fn assume_preprocessed(maps: Var<'g>) -> Self {
        Self { maps }
    }
}

pub fn smoothing_kernel() -> Tensor {
    gaussian_kernel(SMOOTHING_SIZE, SMOOTHING_SIGMA)
}

/// Scale by 100, softmax over all positions of each map, smooth with the
/// normalized 3x3 Gaussian (zero padding), then renormalize each map to sum 1.
pub fn preprocess_attention<'g>(raw: RawAttention<'g>) -> Result<Attention<'g>> {
    let shape = raw.maps.shape();
    let (s, h, w) = (shape[0], shape[1], shape[2]);
    let flat = raw.maps.scale(ATTENTION_SCALE).reshape(&[s, h * w])?;
    let soft = flat.softmax(1)?.reshape(&[s, h, w])?;
    let smooth = soft.conv2d(&smoothing_kernel())?;
    let total = smooth.sum_axes(&[1, 2], true)?;
    let maps = smooth.div(total)?;
    Ok(Attention { maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn run(raw: Tensor) -> Tensor {
        let g = Graph::new();
        let maps = g.leaf(raw);
        let out = preprocess_attention(RawAttention { maps }).unwrap();
        (*out.maps().value()).clone()
    }

    #[test]
    fn constant_map_is_flat_in_the_interior() {
        let out = run(Tensor::full(&[2, 16, 16], 0.3));
        let centre = out.data()[8 * 16 + 8];
        for y in 1..15 {
            for x in 1..15 {
                assert!((out.data()[y * 16 + x] - centre).abs() < 1e-15);
            }
        }
        // zero padding drains mass from the border before renormalization
        assert!(out.data()[0] < centre);
        assert!((out.index0(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spike_dominates_after_softmax() {
        let mut raw = Tensor::zeros(&[1, 16, 16]);
        let mut data = raw.clone().into_data();
        data[5 * 16 + 7] = 1.0;
        raw = Tensor::new(&[1, 16, 16], data).unwrap();
        let g = Graph::new();
        let maps = g.leaf(raw);
        let soft = maps.scale(ATTENTION_SCALE).reshape(&[1, 256]).unwrap().softmax(1).unwrap();
        let spike = soft.value().data()[5 * 16 + 7];
        let expected = 100f64.exp() / (100f64.exp() + 255.0);
        assert!((spike - expected).abs() < 1e-15);
        let out = run(maps.value().as_ref().clone());
        let k = smoothing_kernel();
        assert!((out.data()[5 * 16 + 7] - k.data()[4]).abs() < 1e-12);
    }

    #[test]
    fn maps_sum_to_one() {
        let raw = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 11) as f64 * 0.01);
        let out = run(raw);
        for s in 0..3 {
            let total: f64 = out.index0(s).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_equivariant_away_from_borders() {
        let bump = |cx: i64, cy: i64| {
            Tensor::from_fn(&[1, 16, 16], |i| {
                let (y, x) = ((i / 16) as i64, (i % 16) as i64);
                let d2 = ((x - cx).pow(2) + (y - cy).pow(2)) as f64;
                0.05 * (-d2 / 2.0).exp()
            })
        };
        let a = run(bump(6, 6));
        let b = run(bump(8, 7));
        // compare a central window shifted by (dx, dy) = (2, 1)
        for y in 3..10 {
            for x in 3..10 {
                let va = a.data()[y * 16 + x];
                let vb = b.data()[(y + 1) * 16 + x + 2];
                assert!((va - vb).abs() < 1e-6, "({x},{y}) {va} vs {vb}");
            }
        }
    }
}
