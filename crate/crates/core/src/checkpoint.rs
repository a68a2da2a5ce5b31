//! Parameter persistence: a UTF-8 manifest line naming each field and its
//! byte offset, followed by the concatenated binary tensor dumps.
//!
//! Offsets are relative to the first byte after the manifest newline. They
//! are redundant with the self-delimiting dumps and exist as an integrity
//! check: a reader verifies each dump starts exactly where the manifest says.

use std::path::Path;

use crate::diff::Tensor;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::projection::PhiParams;
use crate::text::MAX_LEN;

const HEADER_WORD: &str = "ckpt1";

pub fn save_tensors(path: &Path, fields: &[(&str, &Tensor)]) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::input("checkpoint: nothing to save"));
    }
    let mut header = String::from(HEADER_WORD);
    let mut body: Vec<u8> = Vec::new();
    for (name, tensor) in fields {
        if name.is_empty() || name.contains(['@', ' ', '\n', '\t']) {
            return Err(Error::input(format!(
                "checkpoint: field name {name:?} contains reserved characters"
            )));
        }
        header.push(' ');
        header.push_str(name);
        header.push('@');
        header.push_str(&body.len().to_string());
        body.extend_from_slice(&tensor.to_bytes());
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::missing(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::input(format!("checkpoint {}: no manifest line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::input(format!("checkpoint {}: manifest is not UTF-8", path.display())))?;
    let body = &bytes[nl + 1..];

    let mut parts = header.split(' ');
    if parts.next() != Some(HEADER_WORD) {
        return Err(Error::input(format!(
            "checkpoint {}: manifest does not start with {HEADER_WORD:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    let mut pos = 0usize;
    for part in parts {
        let (name, offset) = part.split_once('@').ok_or_else(|| {
            Error::input(format!(
                "checkpoint {}: malformed manifest entry {part:?}",
                path.display()
            ))
        })?;
        let offset: usize = offset.parse().map_err(|_| {
            Error::input(format!(
                "checkpoint {}: bad offset in entry {part:?}",
                path.display()
            ))
        })?;
        if offset != pos {
            return Err(Error::input(format!(
                "checkpoint {}: field {name} claims offset {offset} but previous data ends at {pos}",
                path.display()
            )));
        }
        if out.iter().any(|(n, _)| n == name) {
            return Err(Error::input(format!(
                "checkpoint {}: duplicate field {name}",
                path.display()
            )));
        }
        let mut cursor = &body[pos.min(body.len())..];
        let before = cursor.len();
        let tensor = Tensor::read_from(&mut cursor).map_err(|e| {
            Error::input(format!(
                "checkpoint {}: field {name} unreadable: {e}",
                path.display()
            ))
        })?;
        pos += before - cursor.len();
        out.push((name.to_string(), tensor));
    }
    if pos != body.len() {
        return Err(Error::input(format!(
            "checkpoint {}: {} trailing bytes after last field",
            path.display(),
            body.len() - pos
        )));
    }
    if out.is_empty() {
        return Err(Error::input(format!(
            "checkpoint {}: manifest lists no fields",
            path.display()
        )));
    }
    Ok(out)
}

fn take(fields: &mut Vec<(String, Tensor)>, name: &str, path: &Path) -> Result<Tensor> {
    let idx = fields.iter().position(|(n, _)| n == name).ok_or_else(|| {
        Error::input(format!(
            "checkpoint {}: missing field {name}",
            path.display()
        ))
    })?;
    Ok(fields.remove(idx).1)
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    save_tensors(path, &params.fields())
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let mut fields = load_tensors(path)?;
    let w_q = take(&mut fields, "w_q", path)?;
    if w_q.shape.len() != 2 || w_q.shape[0] != w_q.shape[1] {
        return Err(Error::input(format!(
            "checkpoint {}: w_q has shape {:?}, expected square",
            path.display(),
            w_q.shape
        )));
    }
    let d = w_q.shape[0];
    let params = EncoderParams {
        d,
        e_w: take(&mut fields, "e_w", path)?,
        p: take(&mut fields, "p", path)?,
        w_q,
        w_k: take(&mut fields, "w_k", path)?,
        w_v: take(&mut fields, "w_v", path)?,
        w_o: take(&mut fields, "w_o", path)?,
        w_1: take(&mut fields, "w_1", path)?,
        b_1: take(&mut fields, "b_1", path)?,
        w_2: take(&mut fields, "w_2", path)?,
        b_2: take(&mut fields, "b_2", path)?,
        w_out: take(&mut fields, "w_out", path)?,
        b_out: take(&mut fields, "b_out", path)?,
    };
    if !fields.is_empty() {
        return Err(Error::input(format!(
            "checkpoint {}: unexpected extra fields {:?}",
            path.display(),
            fields.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
        )));
    }
    let d4 = 4 * d;
    let expect: [(&str, &[usize]); 11] = [
        ("p", &[MAX_LEN, d]),
        ("w_k", &[d, d]),
        ("w_v", &[d, d]),
        ("w_o", &[d, d]),
        ("w_1", &[d, d4]),
        ("b_1", &[d4]),
        ("w_2", &[d4, d]),
        ("b_2", &[d]),
        ("w_out", &[d, d]),
        ("b_out", &[d]),
        ("e_w", &[params.e_w.shape[0], d]),
    ];
    for (name, shape) in expect {
        let got = &params.field(name).unwrap().shape;
        if got != shape {
            return Err(Error::input(format!(
                "checkpoint {}: field {name} has shape {:?}, expected {:?}",
                path.display(),
                got,
                shape
            )));
        }
    }
    if params.vocab_size() < 3 {
        return Err(Error::input(format!(
            "checkpoint {}: embedding table smaller than the reserved ids",
            path.display()
        )));
    }
    Ok(params)
}

pub fn save_phi(path: &Path, phi: &PhiParams) -> Result<()> {
    save_tensors(path, &phi.fields())
}

pub fn load_phi(path: &Path) -> Result<PhiParams> {
    let mut fields = load_tensors(path)?;
    let w_1 = take(&mut fields, "w_1", path)?;
    if w_1.shape.len() != 2 || w_1.shape[1] != 4 * w_1.shape[0] {
        return Err(Error::input(format!(
            "checkpoint {}: w_1 has shape {:?}, expected [d, 4d]",
            path.display(),
            w_1.shape
        )));
    }
    let d = w_1.shape[0];
    let phi = PhiParams {
        d,
        w_1,
        b_1: take(&mut fields, "b_1", path)?,
        w_2: take(&mut fields, "w_2", path)?,
        b_2: take(&mut fields, "b_2", path)?,
    };
    if !fields.is_empty() {
        return Err(Error::input(format!(
            "checkpoint {}: unexpected extra fields {:?}",
            path.display(),
            fields.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
        )));
    }
    for (name, shape) in [
        ("b_1", vec![4 * d]),
        ("w_2", vec![4 * d, d]),
        ("b_2", vec![d]),
    ] {
        let got = match name {
            "b_1" => &phi.b_1.shape,
            "w_2" => &phi.w_2.shape,
            _ => &phi.b_2.shape,
        };
        if *got != shape {
            return Err(Error::input(format!(
                "checkpoint {}: field {name} has shape {got:?}, expected {shape:?}",
                path.display()
            )));
        }
    }
    Ok(phi)
}

pub fn save_surrogate(path: &Path, sur: &crate::encoder::VisualSurrogate) -> Result<()> {
    let gap = Tensor::vector(sur.gap.clone());
    let sigma = Tensor::scalar(sur.sigma_img);
    save_tensors(path, &[("gap", &gap), ("sigma_img", &sigma)])
}

pub fn load_surrogate(path: &Path) -> Result<crate::encoder::VisualSurrogate> {
    let mut fields = load_tensors(path)?;
    let gap = take(&mut fields, "gap", path)?;
    let sigma = take(&mut fields, "sigma_img", path)?;
    if gap.shape.len() != 1 || !sigma.shape.is_empty() {
        return Err(Error::input(format!(
            "checkpoint {}: surrogate fields have wrong ranks",
            path.display()
        )));
    }
    if !fields.is_empty() {
        return Err(Error::input(format!(
            "checkpoint {}: unexpected extra fields",
            path.display()
        )));
    }
    let sigma_img = sigma.values[0];
    if sigma_img < 0.0 {
        return Err(Error::input(format!(
            "checkpoint {}: negative sigma_img {sigma_img}",
            path.display()
        )));
    }
    Ok(crate::encoder::VisualSurrogate {
        gap: gap.values,
        sigma_img,
    })
}
