//! Packed tensor format for encoded stacks: magic `STK1`, u32 S, C, H, W
//! (little-endian), then i8 values row-major.

use std::fs;
use std::path::Path;

use spikefpn_core::encoding::FrameStack;

use crate::error::{CliError, Result};

pub const STK1_MAGIC: &[u8; 4] = b"STK1";

pub fn save_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    let (s, c, h, w) = stack.shape();
    let mut buf = Vec::with_capacity(4 + 16 + stack.numel());
    buf.extend_from_slice(STK1_MAGIC);
    for dim in [s, c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend(stack.data().iter().map(|v| *v as u8));
    fs::write(path, buf).map_err(CliError::io(path))
}

pub fn load_stack(path: &Path, t_end: u64) -> Result<FrameStack> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    if bytes.len() < 20 || &bytes[..4] != STK1_MAGIC {
        return Err(CliError::Other(format!(
            "{}: not an STK1 stack file",
            path.display()
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (s, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let data: Vec<i8> = bytes[20..].iter().map(|b| *b as i8).collect();
    FrameStack::from_raw(s, c, h, w, t_end, data).map_err(Into::into)
}
