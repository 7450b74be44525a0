//! ViT token grids: a view's token sequence together with its patch-grid shape.

/// L x C token matrix for one view, where L = grid_h * grid_w.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub view_index: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Row-major: tokens[(l * channels) + c].
    pub tokens: Vec<f64>,
}

impl TokenGrid {
    pub fn new(view_index: usize, grid_h: usize, grid_w: usize, channels: usize) -> Self {
        TokenGrid {
            view_index,
            grid_h,
            grid_w,
            channels,
            tokens: vec![0.0; grid_h * grid_w * channels],
        }
    }

    pub fn from_tokens(
        view_index: usize,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        tokens: Vec<f64>,
    ) -> Self {
        assert_eq!(
            tokens.len(),
            grid_h * grid_w * channels,
            "token count {} does not match patch-grid area {}x{} x {} channels",
            tokens.len() / channels,
            grid_h,
            grid_w,
            channels
        );
        TokenGrid {
            view_index,
            grid_h,
            grid_w,
            channels,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn token(&self, l: usize) -> &[f64] {
        &self.tokens[l * self.channels..(l + 1) * self.channels]
    }
}
