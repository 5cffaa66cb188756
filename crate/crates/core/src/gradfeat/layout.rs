use std::ops::Range;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::tinylm::{ModelConfig, ParamLayout, TensorRole};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Attention,
    Mlp,
}

/// A parameter tensor stacked into a block; `transpose` orients it so the
/// model-width axis is the column axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMember {
    pub tensor: usize,
    pub transpose: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub name: String,
    pub kind: MatrixKind,
    pub layers: Range<usize>,
    pub members: Vec<BlockMember>,
    pub rows: usize,
    pub cols: usize,
}

/// Grouping of every non-embedding parameter matrix into concatenated
/// layer blocks.
///
/// Consecutive layers are split into `groups` groups. Each group yields an
/// attention block (`wq, wk, wv, wo` of its layers) and an MLP block
/// (`w_up` and `w_down^T` of its layers), stacked along rows so every block
/// has `embed_dim` columns. The output head joins the last MLP block.
/// Blocks are ordered group by group, attention before MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlockLayout {
    blocks: Vec<LayerBlock>,
    groups: usize,
}

impl LayerBlockLayout {
    pub fn new(config: &ModelConfig, groups: usize) -> Result<Self> {
        config.validate()?;
        if groups == 0 || groups > config.layers {
            return Err(Error::InvalidConfig(format!(
                "projection.layer_blocks must be in 1..={} (model layers), got {groups}",
                config.layers
            )));
        }
        let params = ParamLayout::new(config);
        let per_group = config.layers.div_ceil(groups);
        let mut blocks = Vec::with_capacity(2 * groups);
        for g in 0..groups {
            let layers = g * per_group..((g + 1) * per_group).min(config.layers);
            let mut attention = Vec::new();
            let mut mlp = Vec::new();
            for l in layers.clone() {
                let base = 1 + 6 * l;
                for (offset, info) in params.layer(l).iter().enumerate() {
                    let member = BlockMember {
                        tensor: base + offset,
                        transpose: info.role == TensorRole::MlpDown,
                    };
                    if info.role.is_attention() {
                        attention.push(member);
                    } else {
                        mlp.push(member);
                    }
                }
            }
            if g + 1 == groups {
                mlp.push(BlockMember { tensor: params.tensors().len() - 1, transpose: false });
            }
            for (kind, members) in [(MatrixKind::Attention, attention), (MatrixKind::Mlp, mlp)] {
                let rows = members
                    .iter()
                    .map(|m| {
                        let t = &params.tensors()[m.tensor];
                        if m.transpose { t.cols } else { t.rows }
                    })
                    .sum();
                let tag = match kind {
                    MatrixKind::Attention => "attn",
                    MatrixKind::Mlp => "mlp",
                };
                blocks.push(LayerBlock {
                    name: format!("{tag}[{}..{}]", layers.start, layers.end),
                    kind,
                    layers: layers.clone(),
                    members,
                    rows,
                    cols: config.embed_dim,
                });
            }
        }
        Ok(LayerBlockLayout { blocks, groups })
    }

    pub fn blocks(&self) -> &[LayerBlock] {
        &self.blocks
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of parameters covered by the blocks.
    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }

    /// Concatenates the block matrices out of a flat parameter-shaped buffer.
    pub fn gather(&self, params: &ParamLayout, flat: &[f32]) -> Result<Vec<Array2<f32>>> {
        if flat.len() != params.total() {
            return Err(Error::shape("flat parameter buffer", params.total(), flat.len()));
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let mut out = Array2::<f32>::zeros((b.rows, b.cols));
                let mut row = 0;
                for m in &b.members {
                    let info = &params.tensors()[m.tensor];
                    let view = params.view(flat, info);
                    let view = if m.transpose { view.reversed_axes() } else { view };
                    out.slice_mut(s![row..row + view.nrows(), ..]).assign(&view);
                    row += view.nrows();
                }
                out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_non_embedding_matrix_in_exactly_one_block() {
        let cfg = ModelConfig { layers: 4, ..Default::default() };
        let layout = LayerBlockLayout::new(&cfg, 2).unwrap();
        let params = ParamLayout::new(&cfg);
        let mut seen = vec![0; params.tensors().len()];
        for b in layout.blocks() {
            for m in &b.members {
                seen[m.tensor] += 1;
            }
            assert!(b.members.iter().all(|m| {
                let role = params.tensors()[m.tensor].role;
                role == TensorRole::Head || role.is_attention() == (b.kind == MatrixKind::Attention)
            }));
        }
        assert_eq!(seen[0], 0, "input embedding excluded");
        assert!(seen[1..].iter().all(|&c| c == 1));
        assert_eq!(layout.parameter_count(), params.total() - params.embedding().len());
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let layout = LayerBlockLayout::new(&cfg, 2).unwrap();
        let shapes: Vec<_> = layout.blocks().iter().map(|b| (b.kind, b.rows, b.cols)).collect();
        assert_eq!(
            shapes,
            vec![
                (MatrixKind::Attention, 256, 64),
                (MatrixKind::Mlp, 512, 64),
                (MatrixKind::Attention, 256, 64),
                (MatrixKind::Mlp, 512 + 512, 64),
            ]
        );
        assert!(LayerBlockLayout::new(&cfg, 3).is_err());
    }

    #[test]
    fn gather_places_transposed_down_projection() {
        let cfg = ModelConfig { vocab_size: 6, layers: 1, embed_dim: 2, mlp_hidden: 3, heads: 1, ..Default::default() };
        let params = ParamLayout::new(&cfg);
        let flat: Vec<f32> = (0..params.total()).map(|i| i as f32).collect();
        let layout = LayerBlockLayout::new(&cfg, 1).unwrap();
        let blocks = layout.gather(&params, &flat).unwrap();
        let down = &params.layer(0)[5];
        let w = params.view(&flat, down);
        // Rows 3..6 of the MLP block hold w_down^T.
        assert_eq!(blocks[1][[3, 1]], w[[1, 0]]);
        assert_eq!(blocks[1][[5, 0]], w[[0, 2]]);
    }
}
