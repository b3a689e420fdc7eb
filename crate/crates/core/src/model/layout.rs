//! Parameter naming, shapes and initialization kinds.

use super::{Hyperparams, GRID};
use crate::features::{MAP_COLS, SOCIAL_COLS, SOCIAL_ROWS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Block {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Encoder {
    pub embed: Linear,
    pub pos: usize,
    pub blocks: Vec<Block>,
    pub proj: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Decoder {
    pub convs: Vec<Conv>,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub entries: Vec<Entry>,
    pub social: Encoder,
    pub map: Encoder,
    pub decoder: Decoder,
}

struct Builder(Vec<Entry>);

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.0.push(Entry { name, shape, init });
        self.0.len() - 1
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.push(
                format!("{name}.weight"),
                vec![input, output],
                Init::FanIn(input),
            ),
            b: self.push(format!("{name}.bias"), vec![output], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.gain"), vec![d], Init::Ones),
            b: self.push(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, d: usize, ff: usize) -> Block {
        Block {
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            o: self.linear(&format!("{name}.attn.out"), d, d),
            ln1: self.norm(&format!("{name}.norm1"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ff, d),
            ln2: self.norm(&format!("{name}.norm2"), d),
        }
    }

    fn encoder(
        &mut self,
        name: &str,
        inputs: usize,
        positions: usize,
        layers: usize,
        h: &Hyperparams,
    ) -> Encoder {
        let d = h.d_model;
        let embed = self.linear(&format!("{name}.embed"), inputs, d);
        let pos = self.push(
            format!("{name}.positions"),
            vec![positions, d],
            Init::FanIn(d),
        );
        let blocks = (0..layers)
            .map(|i| self.block(&format!("{name}.block{i}"), d, h.ff_hidden))
            .collect();
        let proj = self.linear(&format!("{name}.proj"), d, GRID);
        Encoder {
            embed,
            pos,
            blocks,
            proj,
        }
    }
}

impl Layout {
    pub fn new(h: &Hyperparams) -> Self {
        let mut b = Builder(Vec::new());
        let social = b.encoder("social", SOCIAL_COLS, SOCIAL_ROWS, h.n_layers_social, h);
        let map = b.encoder("map", MAP_COLS, h.map_rows, h.n_layers_map, h);
        let mut convs = Vec::new();
        let mut channels = 2;
        for (i, &out) in h.decoder_channels.iter().enumerate() {
            let fan_in = channels * 9;
            convs.push(Conv {
                w: b.push(
                    format!("decoder.conv{i}.weight"),
                    vec![out, channels, 3, 3],
                    Init::FanIn(fan_in),
                ),
                b: b.push(format!("decoder.conv{i}.bias"), vec![out], Init::Zeros),
                stride: if i == 0 { 1 } else { 2 },
            });
            channels = out;
        }
        let side = h.decoder_side();
        let head = b.linear(
            "decoder.head",
            channels * side * side,
            super::COARSE_STEPS * 2,
        );
        Layout {
            entries: b.0,
            social,
            map,
            decoder: Decoder { convs, head },
        }
    }

    pub fn numel(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}
