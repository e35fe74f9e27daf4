/// 2x2 max pooling with stride 2 on `[C, B, H, W]` (odd trailing rows/columns dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    input_len: usize,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &[f32], planes: usize, h: usize, w: usize, cache: bool) -> Vec<f32> {
        assert_eq!(x.len(), planes * h * w, "pool input size");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![0.0; planes * oh * ow];
        let mut arg = if cache { vec![0u32; y.len()] } else { Vec::new() };
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    y[o] = src[best];
                    if cache {
                        arg[o] = (p * h * w + best) as u32;
                    }
                }
            }
        }
        if cache {
            self.argmax = arg;
            self.input_len = x.len();
        }
        y
    }

    pub fn backward(&self, dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0; self.input_len];
        for (&i, &d) in self.argmax.iter().zip(dy) {
            dx[i as usize] += d;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_maxima_and_routes_gradients() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mut p = MaxPool2::default();
        let y = p.forward(&x, 1, 3, 4, true);
        assert_eq!(y, vec![5.0, 9.0]);
        let dx = p.backward(&[1.0, 2.0]);
        assert_eq!(dx[1], 1.0);
        assert_eq!(dx[6], 2.0);
        assert_eq!(dx.iter().sum::<f32>(), 3.0);
    }
}
