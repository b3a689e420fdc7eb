//! Forward pass on a tape. Every function takes the batch as a slice and
//! stacks it, so one call runs all samples together.

use super::layout::{Block, Encoder, Linear, Norm};
use super::{Model, COARSE_STEPS, GRID};
use crate::error::{Error, Result};
use crate::features::{MapMatrix, SocialMatrix, MAP_COLS, SOCIAL_COLS, SOCIAL_ROWS};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Output of [`Model::encode_social`].
#[derive(Debug, Clone, Copy)]
pub struct SocialEncoding {
    /// Final hidden tokens, `[B * 8, d_model]`; queries of the map encoder.
    pub tokens: Var,
    /// `[B, 1, 8, 8]`.
    pub embedding: Var,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub social: SocialEncoding,
    pub map: Var,
    /// `[B, 30, 2]`.
    pub coarse: Var,
    /// `[B, 60, 2]`.
    pub full: Var,
}

/// Key rows visible to one sample's queries.
struct Group {
    query_start: usize,
    keys: Vec<usize>,
}

/// Doubles the time resolution: odd entries are the coarse points, even
/// entries midpoints, with the origin left of the first point.
pub fn upsample(coarse: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut prev = [0.0, 0.0];
    let mut out = Vec::with_capacity(coarse.len() * 2);
    for &c in coarse {
        out.push([(prev[0] + c[0]) * 0.5, (prev[1] + c[1]) * 0.5]);
        out.push(c);
        prev = c;
    }
    out
}

impl<T: Scalar> Model<T> {
    fn linear(&self, tape: &mut Tape<T>, p: &[Var], x: Var, l: Linear) -> Result<Var> {
        tape.linear(x, p[l.w], p[l.b])
    }

    fn norm(&self, tape: &mut Tape<T>, p: &[Var], x: Var, n: Norm) -> Result<Var> {
        tape.layer_norm(x, p[n.g], p[n.b], T::of(self.hyper.layer_norm_eps))
    }

    /// Post-norm attention block. `kv` is `None` when no sample has keys.
    fn block(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        kv: Option<Var>,
        groups: &[Group],
        blk: &Block,
    ) -> Result<Var> {
        let d = self.hyper.d_model;
        let heads = self.hyper.n_heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let q = self.linear(tape, p, x, blk.q)?;
        let (k, v) = match kv {
            Some(src) => (
                Some(self.linear(tape, p, src, blk.k)?),
                Some(self.linear(tape, p, src, blk.v)?),
            ),
            None => (None, None),
        };
        let mut per_sample = Vec::with_capacity(groups.len());
        for g in groups {
            let (Some(k), Some(v)) = (k, v) else {
                per_sample.push(tape.constant(Tensor::zeros(&[SOCIAL_ROWS, d])));
                continue;
            };
            if g.keys.is_empty() {
                per_sample.push(tape.constant(Tensor::zeros(&[SOCIAL_ROWS, d])));
                continue;
            }
            let qb = tape.slice(q, 0, g.query_start, SOCIAL_ROWS)?;
            let kb = tape.gather_rows(k, &g.keys)?;
            let kt = tape.transpose(kb)?;
            let vb = tape.gather_rows(v, &g.keys)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice(qb, 1, h * dh, dh)?;
                let kh = tape.slice(kt, 0, h * dh, dh)?;
                let vh = tape.slice(vb, 1, h * dh, dh)?;
                let scores = tape.matmul(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax(scores);
                outs.push(tape.matmul(weights, vh)?);
            }
            per_sample.push(tape.concat(&outs, 1)?);
        }
        let attn = tape.concat(&per_sample, 0)?;
        let attn = self.linear(tape, p, attn, blk.o)?;
        let h = tape.add(x, attn)?;
        let h = self.norm(tape, p, h, blk.ln1)?;
        let f = self.linear(tape, p, h, blk.ff1)?;
        let f = tape.leaky_relu(f, T::of(self.hyper.leaky_slope));
        let f = self.linear(tape, p, f, blk.ff2)?;
        let out = tape.add(h, f)?;
        self.norm(tape, p, out, blk.ln2)
    }

    /// Per-token projection to 8 values, reshaped to `[B, 1, 8, 8]`.
    fn project(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        tokens: Var,
        enc: &Encoder,
        batch: usize,
    ) -> Result<Var> {
        let grid = self.linear(tape, p, tokens, enc.proj)?;
        tape.reshape(grid, &[batch, 1, GRID, GRID])
    }

    pub fn encode_social(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        socials: &[&SocialMatrix],
    ) -> Result<SocialEncoding> {
        let enc = &self.layout.social;
        let d = self.hyper.d_model;
        let batch = socials.len();
        if batch == 0 {
            return Err(Error::shape(
                "encode_social",
                &[0, SOCIAL_ROWS, SOCIAL_COLS],
                &[1, SOCIAL_ROWS, SOCIAL_COLS],
            ));
        }
        let data = socials.iter().flat_map(|s| s.flat()).map(T::of).collect();
        let x = tape.constant(Tensor::new(&[batch * SOCIAL_ROWS, SOCIAL_COLS], data)?);
        let h = self.linear(tape, p, x, enc.embed)?;
        let pos = if self.hyper.neighbor_positions {
            p[enc.pos]
        } else {
            let focal = tape.gather_rows(p[enc.pos], &[0])?;
            let rest = tape.constant(Tensor::zeros(&[SOCIAL_ROWS - 1, d]));
            tape.concat(&[focal, rest], 0)?
        };
        let pos = tape.reshape(pos, &[SOCIAL_ROWS * d])?;
        let h = tape.reshape(h, &[batch, SOCIAL_ROWS * d])?;
        let h = tape.add_bias(h, pos)?;
        let mut h = tape.reshape(h, &[batch * SOCIAL_ROWS, d])?;
        let groups: Vec<Group> = socials
            .iter()
            .enumerate()
            .map(|(b, s)| Group {
                query_start: b * SOCIAL_ROWS,
                keys: (0..SOCIAL_ROWS)
                    .filter(|&r| r == 0 || !s.is_padding(r))
                    .map(|r| b * SOCIAL_ROWS + r)
                    .collect(),
            })
            .collect();
        for blk in &enc.blocks {
            h = self.block(tape, p, h, Some(h), &groups, blk)?;
        }
        let embedding = self.project(tape, p, h, enc, batch)?;
        Ok(SocialEncoding {
            tokens: h,
            embedding,
        })
    }

    pub fn encode_map(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        maps: &[&MapMatrix],
        social: &SocialEncoding,
    ) -> Result<Var> {
        let enc = &self.layout.map;
        let capacity = self.hyper.map_rows;
        let mut data = Vec::new();
        let mut ranks = Vec::new();
        let mut groups = Vec::with_capacity(maps.len());
        for (b, m) in maps.iter().enumerate() {
            if m.rows.len() > capacity {
                return Err(Error::shape(
                    "encode_map",
                    &[m.rows.len(), MAP_COLS],
                    &[capacity, MAP_COLS],
                ));
            }
            let first = ranks.len();
            for (r, row) in m.rows.iter().enumerate() {
                if !m.is_padding(r) {
                    data.extend(row.iter().map(|&v| T::of(v)));
                    ranks.push(r);
                }
            }
            groups.push(Group {
                query_start: b * SOCIAL_ROWS,
                keys: (first..ranks.len()).collect(),
            });
        }
        let kv = if ranks.is_empty() {
            None
        } else {
            let x = tape.constant(Tensor::new(&[ranks.len(), MAP_COLS], data)?);
            let e = self.linear(tape, p, x, enc.embed)?;
            let pos = tape.gather_rows(p[enc.pos], &ranks)?;
            Some(tape.add(e, pos)?)
        };
        let mut h = social.tokens;
        for blk in &enc.blocks {
            h = self.block(tape, p, h, kv, &groups, blk)?;
        }
        self.project(tape, p, h, enc, maps.len())
    }

    /// `[B, 1, 8, 8]` twice → `[B, 30, 2]` focal-frame waypoints.
    pub fn decode(&self, tape: &mut Tape<T>, p: &[Var], social: Var, map: Var) -> Result<Var> {
        let expect = |tape: &Tape<T>, v: Var| -> Result<usize> {
            match *tape.value(v).shape() {
                [b, 1, GRID, GRID] => Ok(b),
                ref s => Err(Error::shape(
                    "decode",
                    s,
                    &[s.first().copied().unwrap_or(0), 1, GRID, GRID],
                )),
            }
        };
        let batch = expect(tape, social)?;
        if expect(tape, map)? != batch {
            return Err(Error::shape(
                "decode",
                tape.value(social).shape(),
                tape.value(map).shape(),
            ));
        }
        let dec = &self.layout.decoder;
        let mut x = tape.concat(&[social, map], 1)?;
        for c in &dec.convs {
            x = tape.conv2d(x, p[c.w], p[c.b], c.stride, 1)?;
            x = tape.leaky_relu(x, T::of(self.hyper.leaky_slope));
        }
        let flat = tape.value(x).numel() / batch;
        let x = tape.reshape(x, &[batch, flat])?;
        let y = self.linear(tape, p, x, dec.head)?;
        tape.reshape(y, &[batch, COARSE_STEPS, 2])
    }

    /// Full composition on `p` (from [`Model::bind`] or a substitute list in
    /// the same order).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        batch: &[(&SocialMatrix, &MapMatrix)],
    ) -> Result<Forward> {
        if p.len() != self.params.len() {
            return Err(Error::shape("forward", &[p.len()], &[self.params.len()]));
        }
        let socials: Vec<&SocialMatrix> = batch.iter().map(|b| b.0).collect();
        let maps: Vec<&MapMatrix> = batch.iter().map(|b| b.1).collect();
        let social = self.encode_social(tape, p, &socials)?;
        let map = self.encode_map(tape, p, &maps, &social)?;
        let coarse = self.decode(tape, p, social.embedding, map)?;
        let full = tape.upsample(coarse)?;
        Ok(Forward {
            social,
            map,
            coarse,
            full,
        })
    }
}
