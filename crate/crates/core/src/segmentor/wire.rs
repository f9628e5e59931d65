//! Message shapes of the line-delimited JSON bridge protocol.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::select::PointRecord;

pub const ENC_F32: &str = "b64f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloReply {
    pub backend: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterPayload {
    pub w: u32,
    pub h: u32,
    pub enc: String,
    pub data: String,
}

impl RasterPayload {
    pub fn from_f32(w: usize, h: usize, values: &[f32]) -> Self {
        Self {
            w: w as u32,
            h: h as u32,
            enc: ENC_F32.into(),
            data: encode_f32(values),
        }
    }

    /// Decodes and checks the value count against the declared size.
    pub fn to_f32(&self) -> Result<Vec<f32>, String> {
        if self.enc != ENC_F32 {
            return Err(format!("unsupported raster encoding '{}'", self.enc));
        }
        let v = decode_f32(&self.data)?;
        if v.len() != self.w as usize * self.h as usize {
            return Err(format!(
                "raster payload has {} values, expected {}x{}",
                v.len(),
                self.w,
                self.h
            ));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub id: u64,
    pub op: String,
    pub image: RasterPayload,
    pub points: Vec<PointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictReply {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RasterPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(data: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_payload_is_little_endian_base64() {
        // 1.0f32 = 00 00 80 3f
        assert_eq!(encode_f32(&[1.0]), "AACAPw==");
        assert_eq!(decode_f32("AACAPw==").unwrap(), vec![1.0]);
        assert!(decode_f32("AACA").is_err());
    }

    #[test]
    fn request_shape() {
        let req = PredictRequest {
            id: 7,
            op: "predict".into(),
            image: RasterPayload::from_f32(1, 1, &[0.5]),
            points: vec![PointRecord {
                x: 0.0,
                y: 0.0,
                label: 1,
            }],
        };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["image"]["enc"], "b64f32");
        assert_eq!(v["points"][0]["label"], 1);
        let err: PredictReply =
            serde_json::from_str(r#"{"id":7,"ok":false,"error":"boom"}"#).unwrap();
        assert_eq!(err.error.as_deref(), Some("boom"));
        assert!(err.mask.is_none());
    }

    #[test]
    fn payload_size_checked() {
        let mut p = RasterPayload::from_f32(2, 2, &[0.0; 4]);
        assert_eq!(p.to_f32().unwrap().len(), 4);
        p.w = 3;
        assert!(p.to_f32().is_err());
    }
}
