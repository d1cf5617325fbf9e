//! Partition of a `C×H×W` feature map into `M×N` non-overlapping windows.
//!
//! Window `(m, n)` (1-based, `m ≤ M`, `n ≤ N`) is node `i = (m−1)·N + n`.
//! Storage is 0-based throughout: node `i` sits at offset `m·N + n` with
//! 0-based `m` and `n`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
}

impl WindowGrid {
    /// `rows × cols` windows over an `height × width` map. Both extents must
    /// divide exactly; there is no implicit padding.
    pub fn new(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("window_grid", "extents must be positive"));
        }
        if !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
            return Err(Error::invalid(
                "window_grid",
                format!("{height}×{width} map is not divisible into {rows}×{cols} windows"),
            ));
        }
        Ok(Self {
            height,
            width,
            rows,
            cols,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Windows along the height (`M`).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Windows along the width (`N`).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn window_height(&self) -> usize {
        self.height / self.rows
    }

    pub fn window_width(&self) -> usize {
        self.width / self.cols
    }

    /// Pixels per window.
    pub fn window_area(&self) -> usize {
        self.window_height() * self.window_width()
    }

    /// `K = M·N`.
    pub fn num_windows(&self) -> usize {
        self.rows * self.cols
    }

    /// 0-based node index of 0-based window `(m, n)`.
    pub fn node_index(&self, m: usize, n: usize) -> usize {
        debug_assert!(m < self.rows && n < self.cols);
        m * self.cols + n
    }

    /// Inverse of [`node_index`](Self::node_index).
    pub fn node_position(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    fn check_map(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match *shape {
            [c, h, w] if h == self.height && w == self.width => Ok(c),
            _ => Err(Error::invalid(
                op,
                format!(
                    "feature map {shape:?} does not match a {}×{} grid",
                    self.height, self.width
                ),
            )),
        }
    }

    /// Source offset in the `C×H×W` map of window `i`, channel `c`, local pixel `(y, x)`.
    fn source(&self, channels: usize, i: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < channels);
        let (m, n) = self.node_position(i);
        let gy = m * self.window_height() + y;
        let gx = n * self.window_width() + x;
        (c * self.height + gy) * self.width + gx
    }

    /// Gather map producing `[K×C×h_w×w_w]` from `[C×H×W]`.
    pub fn partition_index(&self, channels: usize) -> Vec<usize> {
        let (wh, ww) = (self.window_height(), self.window_width());
        let mut idx = Vec::with_capacity(channels * self.height * self.width);
        for i in 0..self.num_windows() {
            for c in 0..channels {
                for y in 0..wh {
                    for x in 0..ww {
                        idx.push(self.source(channels, i, c, y, x));
                    }
                }
            }
        }
        idx
    }

    /// Gather map producing pixel nodes `[K×(h_w·w_w)×C]` from `[C×H×W]`:
    /// each window becomes a node matrix whose rows are its pixels.
    pub fn pixel_node_index(&self, channels: usize) -> Vec<usize> {
        let (wh, ww) = (self.window_height(), self.window_width());
        let mut idx = Vec::with_capacity(channels * self.height * self.width);
        for i in 0..self.num_windows() {
            for y in 0..wh {
                for x in 0..ww {
                    for c in 0..channels {
                        idx.push(self.source(channels, i, c, y, x));
                    }
                }
            }
        }
        idx
    }

    /// `[C×H×W] → [K×C×h_w×w_w]`.
    pub fn partition(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_map("partition", x.shape())?;
        let data = self
            .partition_index(c)
            .iter()
            .map(|&i| x.data()[i])
            .collect();
        Ok(Tensor::from_parts(self.windows_shape(c), data))
    }

    /// `[K×C×h_w×w_w] → [C×H×W]`, the exact inverse of [`partition`](Self::partition).
    pub fn merge(&self, windows: &Tensor) -> Result<Tensor> {
        let c = self.check_windows("merge", windows.shape())?;
        let mut out = vec![0.0; windows.numel()];
        for (&dst, &v) in self.partition_index(c).iter().zip(windows.data()) {
            out[dst] = v;
        }
        Ok(Tensor::from_parts(vec![c, self.height, self.width], out))
    }

    fn windows_shape(&self, channels: usize) -> Vec<usize> {
        vec![
            self.num_windows(),
            channels,
            self.window_height(),
            self.window_width(),
        ]
    }

    fn check_windows(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match *shape {
            [k, c, h, w]
                if k == self.num_windows()
                    && h == self.window_height()
                    && w == self.window_width() =>
            {
                Ok(c)
            }
            _ => Err(Error::invalid(
                op,
                format!(
                    "windows {shape:?} inconsistent with {}×{} windows of {}×{}",
                    self.rows,
                    self.cols,
                    self.window_height(),
                    self.window_width()
                ),
            )),
        }
    }

    /// Taped [`partition`](Self::partition).
    pub fn partition_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.check_map("partition", tape.shape(x))?;
        tape.gather(x, Arc::from(self.partition_index(c)), self.windows_shape(c))
    }

    /// Taped [`merge`](Self::merge).
    pub fn merge_var(&self, tape: &mut Tape, windows: Var) -> Result<Var> {
        let c = self.check_windows("merge", tape.shape(windows))?;
        let inv = invert(&self.partition_index(c));
        tape.gather(windows, Arc::from(inv), [c, self.height, self.width])
    }

    /// `[C×H×W] → [K×T×C]` with `T = h_w·w_w` pixel nodes per window.
    pub fn pixel_nodes_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.check_map("pixel_nodes", tape.shape(x))?;
        tape.gather(
            x,
            Arc::from(self.pixel_node_index(c)),
            [self.num_windows(), self.window_area(), c],
        )
    }

    /// Inverse of [`pixel_nodes_var`](Self::pixel_nodes_var).
    pub fn merge_pixel_nodes_var(&self, tape: &mut Tape, nodes: Var) -> Result<Var> {
        let shape = tape.shape(nodes).to_vec();
        let c = match *shape.as_slice() {
            [k, t, c] if k == self.num_windows() && t == self.window_area() => c,
            _ => {
                return Err(Error::invalid(
                    "merge_pixel_nodes",
                    format!("bad node shape {shape:?}"),
                ))
            }
        };
        let inv = invert(&self.pixel_node_index(c));
        tape.gather(nodes, Arc::from(inv), [c, self.height, self.width])
    }
}

/// Inverse of a permutation given as a gather map.
pub(crate) fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// `[K×C'×h×w] → [K×D]` with `D = C'·h·w`; row `i` is window `i` in row-major order.
pub fn flatten_nodes(windows: &Tensor) -> Result<Tensor> {
    match *windows.shape() {
        [k, ref rest @ ..] if !rest.is_empty() => windows.reshape([k, rest.iter().product()]),
        _ => Err(Error::invalid(
            "flatten_nodes",
            format!("shape {:?}", windows.shape()),
        )),
    }
}

/// Inverse of [`flatten_nodes`] given the original window extents.
pub fn unflatten_nodes(
    nodes: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    match *nodes.shape() {
        [k, d] if d == channels * height * width => nodes.reshape([k, channels, height, width]),
        _ => Err(Error::shape(
            "unflatten_nodes",
            nodes.shape(),
            &[channels, height, width],
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_window_is_top_left_block() {
        let x = Tensor::from_fn([1, 4, 4], |i| i as f64);
        let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
        let w = grid.partition(&x).unwrap();
        assert_eq!(w.shape(), &[4, 1, 2, 2]);
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        // window (m, n) = (1, 2) in 1-based terms is node i = 2, offset 1
        assert_eq!(grid.node_index(0, 1), 1);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_window_is_identity() {
        let x = Tensor::from_fn([2, 3, 5], |i| i as f64 * 0.25);
        let grid = WindowGrid::new(3, 5, 1, 1).unwrap();
        let w = grid.partition(&x).unwrap();
        assert_eq!(w.data(), x.data());
        assert_eq!(grid.merge(&w).unwrap(), x);
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        assert!(WindowGrid::new(5, 4, 2, 2).is_err());
        assert!(WindowGrid::new(4, 6, 2, 4).is_err());
    }

    #[test]
    fn merge_rejects_inconsistent_window_count() {
        let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
        assert!(grid.merge(&Tensor::zeros([3, 1, 2, 2])).is_err());
        assert!(grid.partition(&Tensor::zeros([1, 4, 6])).is_err());
    }

    #[test]
    fn merge_of_zero_windows_is_zero() {
        let grid = WindowGrid::new(6, 4, 3, 2).unwrap();
        let m = grid.merge(&Tensor::zeros([6, 2, 2, 2])).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn index_bijection() {
        let grid = WindowGrid::new(12, 10, 4, 5).unwrap();
        let mut seen = vec![false; grid.num_windows()];
        for m in 0..4 {
            for n in 0..5 {
                let i = grid.node_index(m, n);
                // 1-based: (m+1 − 1)·N + (n+1) − 1
                assert_eq!(i, m * 5 + n);
                assert_eq!(grid.node_position(i), (m, n));
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }

    #[test]
    fn flatten_singleton_and_zero() {
        let w = Tensor::new([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(flatten_nodes(&w).unwrap().data(), &[5.0]);
        assert_eq!(flatten_nodes(&w).unwrap().shape(), &[1, 1]);
        let z = flatten_nodes(&Tensor::zeros([4, 2, 3, 3])).unwrap();
        assert_eq!(z.shape(), &[4, 18]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_nodes_round_trip_on_tape() {
        let grid = WindowGrid::new(4, 6, 2, 3).unwrap();
        let x = Tensor::from_fn([3, 4, 6], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let nodes = grid.pixel_nodes_var(&mut tape, v).unwrap();
        assert_eq!(tape.shape(nodes), &[6, 4, 3]);
        // node 0, pixel 1 is map position (0, 1); its channels are rows of the node matrix
        let n = tape.value(nodes);
        assert_eq!(
            &n.data()[3..6],
            &[x.at(&[0, 0, 1]), x.at(&[1, 0, 1]), x.at(&[2, 0, 1])]
        );
        let back = grid.merge_pixel_nodes_var(&mut tape, nodes).unwrap();
        assert_eq!(tape.value(back), &x);
    }
}
