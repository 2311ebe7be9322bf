/// A batch of images stored as `(n, height, width, channels)` in row-major
/// order, values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn zeros(n: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            n,
            height,
            width,
            channels,
            data: vec![0.0; n * height * width * channels],
        }
    }

    pub fn from_images(height: usize, width: usize, channels: usize, images: &[&[f32]]) -> Self {
        let per = height * width * channels;
        let mut data = Vec::with_capacity(per * images.len());
        for img in images {
            assert_eq!(img.len(), per, "image size mismatch");
            data.extend_from_slice(img);
        }
        Self {
            n: images.len(),
            height,
            width,
            channels,
            data,
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let per = self.image_len();
        &mut self.data[i * per..(i + 1) * per]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let images: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        Self::from_images(self.height, self.width, self.channels, &images)
    }

    pub fn concat(parts: &[&ImageBatch]) -> Self {
        let first = parts[0];
        let mut out = Self::zeros(0, first.height, first.width, first.channels);
        for p in parts {
            assert_eq!(
                (p.height, p.width, p.channels),
                (first.height, first.width, first.channels)
            );
            out.data.extend_from_slice(&p.data);
            out.n += p.n;
        }
        out
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        (self.n, self.height, self.width, self.channels)
            == (other.n, other.height, other.width, other.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Mean absolute per-pixel difference between two images.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

/// Horizontal mirror of one `(h, w, c)` image.
pub fn flip_horizontal(img: &[f32], height: usize, width: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let src = (y * width + x) * channels;
            let dst = (y * width + (width - 1 - x)) * channels;
            out[dst..dst + channels].copy_from_slice(&img[src..src + channels]);
        }
    }
    out
}
