//! Binary checkpoints: architecture, parameters, optional optimiser state.
//!
//! Layout (little-endian): magic `RGCK`, `u16` version, the architecture
//! block (`u32` fields), one `u32` length plus `f64` values per parameter
//! block, then a `u8` flag followed, if set, by the epoch (`u64`) and the
//! velocity blocks in the same layout as the parameters.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{GroupShape, LayerConfig};
use crate::tensor::Dims;
use crate::train::{Architecture, Gradients, Model, TrainState};

const MAGIC: &[u8; 4] = b"RGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
}

fn write_arch(w: &mut Writer, a: &Architecture) {
    w.usize(a.input.channels);
    w.usize(a.input.height);
    w.usize(a.input.width);
    w.usize(a.layers.len());
    for l in &a.layers {
        for v in [
            l.in_channels,
            l.out_channels,
            l.kernel.0,
            l.kernel.1,
            l.stride,
            l.pad.0,
            l.pad.1,
        ] {
            w.usize(v);
        }
        let g = l.nms.unwrap_or(GroupShape { h: 0, w: 0 });
        w.usize(g.h);
        w.usize(g.w);
    }
    w.usize(a.keypoints);
    w.usize(a.grid.0);
    w.usize(a.grid.1);
    w.usize(a.taps.len());
    for &t in &a.taps {
        w.usize(t);
    }
}

fn read_arch(r: &mut Reader) -> Result<Architecture> {
    let sec = "architecture";
    let input = Dims::new(r.usize(sec)?, r.usize(sec)?, r.usize(sec)?);
    let n = r.usize(sec)?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let mut f = [0usize; 9];
        for v in &mut f {
            *v = r.usize(sec)?;
        }
        layers.push(LayerConfig {
            in_channels: f[0],
            out_channels: f[1],
            kernel: (f[2], f[3]),
            stride: f[4],
            pad: (f[5], f[6]),
            nms: (f[7] != 0 || f[8] != 0).then_some(GroupShape { h: f[7], w: f[8] }),
        });
    }
    let keypoints = r.usize(sec)?;
    let grid = (r.usize(sec)?, r.usize(sec)?);
    let nt = r.usize(sec)?;
    let mut taps = Vec::with_capacity(nt.min(1024));
    for _ in 0..nt {
        taps.push(r.usize(sec)?);
    }
    Ok(Architecture {
        input,
        layers,
        keypoints,
        grid,
        taps,
    })
}

fn write_blocks(w: &mut Writer, blocks: &[&[f64]]) {
    for b in blocks {
        w.usize(b.len());
        w.f64s(b);
    }
}

fn read_blocks(r: &mut Reader, model: &Model, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (block, p) in model.layout().iter().zip(model.params()) {
        let section = format!("{what}: {block}");
        let at = r.pos();
        let n = r.usize(&section)?;
        if n != p.len() {
            return Err(Error::Format {
                what: "checkpoint",
                offset: at,
                msg: format!("{section} has {n} values, architecture needs {}", p.len()),
            });
        }
        out.push(r.f64s(n, &section)?);
    }
    Ok(out)
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(CHECKPOINT_VERSION);
    write_arch(&mut w, &c.model.architecture());
    write_blocks(&mut w, &c.model.params());
    match &c.state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.epoch as u64);
            let v: Vec<&[f64]> = s.velocity.blocks.iter().map(Vec::as_slice).collect();
            write_blocks(&mut w, &v);
        }
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.expect_magic(MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let at = r.pos();
    let arch = read_arch(&mut r)?;
    let mut model = arch.build().map_err(|e| Error::Format {
        what: "checkpoint",
        offset: at,
        msg: format!("architecture block is not buildable: {e}"),
    })?;
    let params = read_blocks(&mut r, &model, "parameters")?;
    for (dst, src) in model.params_mut().into_iter().zip(params) {
        dst.copy_from_slice(&src);
    }
    let state = match r.u8("training state flag")? {
        0 => None,
        1 => {
            let epoch = r.u64("training state")? as usize;
            let blocks = read_blocks(&mut r, &model, "velocity")?;
            Some(TrainState {
                velocity: Gradients { blocks },
                epoch,
            })
        }
        f => return Err(r.error(format!("training state flag must be 0 or 1, found {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and refuses it unless its architecture is `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    if let Some(diff) = expected.first_mismatch(&c.model.architecture()) {
        return Err(Error::Architecture(format!(
            "checkpoint {} does not fit the configured model; {diff}",
            path.display()
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            input: Dims::new(1, 8, 8),
            layers: vec![
                LayerConfig::same(1, 3, 3, 2).with_nms(GroupShape::square(2)),
                LayerConfig::same(3, 4, 3, 2),
            ],
            keypoints: 2,
            grid: (2, 2),
            taps: vec![1],
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut model = arch().build().unwrap();
        model.init(3);
        let mut velocity = Gradients::zeros_like(&model);
        velocity.blocks[0][0] = -0.25;
        Checkpoint {
            model,
            state: Some(TrainState { velocity, epoch: 4 }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample_checkpoint();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);

        let bare = Checkpoint { state: None, ..c };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&bare)).unwrap(), bare);
    }

    #[test]
    fn version_bump_is_refused() {
        let mut bytes = encode_checkpoint(&sample_checkpoint());
        bytes[4] = 2;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(
            err.contains("version 2") && err.contains("version 1"),
            "{err}"
        );
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = encode_checkpoint(&sample_checkpoint());
        let err = decode_checkpoint(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = decode_checkpoint(b"XXXX").unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn mismatched_architecture_names_the_layer() {
        let dir = std::env::temp_dir().join(format!("rgck-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.rgck");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut other = arch();
        other.layers[1].out_channels = 5;
        let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
        assert!(load_checkpoint_for(&path, &arch()).is_ok());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
