//! Minimal CoAP (RFC 7252) framing: TIP frames ride as the payload of a
//! confirmable POST to `/tip` with Content-Format 42.

use rand::RngCore;
use thiserror::Error;

pub const VERSION: u8 = 1;
pub const TYPE_CON: u8 = 0;
pub const TYPE_NON: u8 = 1;
pub const TYPE_ACK: u8 = 2;
pub const CODE_POST: u8 = 0x02;
pub const CODE_CONTENT: u8 = 0x45;
pub const OPTION_URI_PATH: u16 = 11;
pub const OPTION_CONTENT_FORMAT: u16 = 12;
pub const CONTENT_FORMAT_OCTET_STREAM: u16 = 42;
pub const TIP_PATH: &str = "tip";
pub const PAYLOAD_MARKER: u8 = 0xFF;
pub const TOKEN_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoapError {
    #[error("not a CoAP message: {0}")]
    NotCoap(&'static str),
    #[error("Uri-Path is not /tip")]
    WrongPath,
    #[error("Content-Format is not application/octet-stream")]
    WrongContentFormat,
    #[error("no payload")]
    NoPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapMessage {
    pub mtype: u8,
    pub code: u8,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// (number, value), ascending by number.
    pub options: Vec<(u16, Vec<u8>)>,
    pub payload: Vec<u8>,
}

fn ext_nibble(v: usize) -> (u8, Vec<u8>) {
    if v < 13 {
        (v as u8, vec![])
    } else if v < 269 {
        (13, vec![(v - 13) as u8])
    } else {
        (14, ((v - 269) as u16).to_be_bytes().to_vec())
    }
}

/// Minimal-length big-endian unsigned option value.
pub fn uint_option(v: u32) -> Vec<u8> {
    let b = v.to_be_bytes();
    let skip = b.iter().take_while(|x| **x == 0).count();
    b[skip..].to_vec()
}

impl CoapMessage {
    pub fn option(&self, number: u16) -> impl Iterator<Item = &[u8]> {
        self.options
            .iter()
            .filter(move |(n, _)| *n == number)
            .map(|(_, v)| v.as_slice())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload.len());
        out.push((VERSION << 6) | ((self.mtype & 3) << 4) | (self.token.len() as u8 & 0x0f));
        out.push(self.code);
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.token);
        let mut opts = self.options.clone();
        opts.sort_by_key(|(n, _)| *n);
        let mut last = 0u16;
        for (number, value) in &opts {
            let (d, dext) = ext_nibble((number - last) as usize);
            let (l, lext) = ext_nibble(value.len());
            out.push((d << 4) | l);
            out.extend(dext);
            out.extend(lext);
            out.extend_from_slice(value);
            last = *number;
        }
        if !self.payload.is_empty() {
            out.push(PAYLOAD_MARKER);
            out.extend_from_slice(&self.payload);
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, CoapError> {
        if b.len() < 4 {
            return Err(CoapError::NotCoap("shorter than the fixed header"));
        }
        if b[0] >> 6 != VERSION {
            return Err(CoapError::NotCoap("version"));
        }
        let mtype = (b[0] >> 4) & 3;
        let tkl = (b[0] & 0x0f) as usize;
        if tkl > 8 {
            return Err(CoapError::NotCoap("token length"));
        }
        let code = b[1];
        let message_id = u16::from_be_bytes([b[2], b[3]]);
        let mut i = 4;
        let token = b
            .get(i..i + tkl)
            .ok_or(CoapError::NotCoap("truncated token"))?
            .to_vec();
        i += tkl;
        let mut options = Vec::new();
        let mut number = 0u16;
        let mut payload = Vec::new();
        let mut saw_marker = false;
        while i < b.len() {
            if b[i] == PAYLOAD_MARKER {
                saw_marker = true;
                payload = b[i + 1..].to_vec();
                break;
            }
            let d = (b[i] >> 4) as usize;
            let l = (b[i] & 0x0f) as usize;
            i += 1;
            let read_ext = |nib: usize, i: &mut usize| -> Result<usize, CoapError> {
                match nib {
                    13 => {
                        let v = *b.get(*i).ok_or(CoapError::NotCoap("truncated option"))? as usize;
                        *i += 1;
                        Ok(v + 13)
                    }
                    14 => {
                        let s = b.get(*i..*i + 2).ok_or(CoapError::NotCoap("truncated option"))?;
                        *i += 2;
                        Ok(u16::from_be_bytes([s[0], s[1]]) as usize + 269)
                    }
                    15 => Err(CoapError::NotCoap("reserved option nibble")),
                    n => Ok(n),
                }
            };
            let delta = read_ext(d, &mut i)?;
            let len = read_ext(l, &mut i)?;
            number = u16::try_from(number as usize + delta)
                .map_err(|_| CoapError::NotCoap("option number overflow"))?;
            let value = b
                .get(i..i + len)
                .ok_or(CoapError::NotCoap("truncated option value"))?;
            options.push((number, value.to_vec()));
            i += len;
        }
        if saw_marker && payload.is_empty() {
            return Err(CoapError::NotCoap("payload marker without payload"));
        }
        Ok(Self {
            mtype,
            code,
            message_id,
            token,
            options,
            payload,
        })
    }
}

pub fn coap_wrap_with(tip: &[u8], message_id: u16, token: [u8; TOKEN_LEN]) -> Vec<u8> {
    CoapMessage {
        mtype: TYPE_CON,
        code: CODE_POST,
        message_id,
        token: token.to_vec(),
        options: vec![
            (OPTION_URI_PATH, TIP_PATH.as_bytes().to_vec()),
            (OPTION_CONTENT_FORMAT, uint_option(CONTENT_FORMAT_OCTET_STREAM as u32)),
        ],
        payload: tip.to_vec(),
    }
    .encode()
}

/// CON POST /tip with a random message id and 4-byte token.
pub fn coap_wrap<R: RngCore>(tip: &[u8], rng: &mut R) -> Vec<u8> {
    let mut token = [0u8; TOKEN_LEN];
    rng.fill_bytes(&mut token);
    coap_wrap_with(tip, rng.next_u32() as u16, token)
}

pub fn coap_unwrap(bytes: &[u8]) -> Result<Vec<u8>, CoapError> {
    let m = CoapMessage::decode(bytes)?;
    if m.code != CODE_POST {
        return Err(CoapError::NotCoap("code is not POST"));
    }
    let path: Vec<&[u8]> = m.option(OPTION_URI_PATH).collect();
    if path != [TIP_PATH.as_bytes()] {
        return Err(CoapError::WrongPath);
    }
    let cf: Vec<&[u8]> = m.option(OPTION_CONTENT_FORMAT).collect();
    let ok = match cf.as_slice() {
        [v] => v.len() <= 2 && v.iter().fold(0u32, |a, b| (a << 8) | *b as u32) == 42,
        _ => false,
    };
    if !ok {
        return Err(CoapError::WrongContentFormat);
    }
    if m.payload.is_empty() {
        return Err(CoapError::NoPayload);
    }
    Ok(m.payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_layout() {
        let w = coap_wrap_with(b"TI", 0x1234, [1, 2, 3, 4]);
        assert_eq!(
            w,
            [
                0x44, 0x02, 0x12, 0x34, 1, 2, 3, 4, 0xB3, b't', b'i', b'p', 0x11, 42, 0xFF, b'T', b'I'
            ]
        );
        assert_eq!(coap_unwrap(&w).unwrap(), b"TI");
        let m = CoapMessage::decode(&w).unwrap();
        assert_eq!(m.option(OPTION_CONTENT_FORMAT).next().unwrap(), [42]);
    }

    fn with(options: Vec<(u16, Vec<u8>)>, payload: &[u8]) -> Vec<u8> {
        CoapMessage {
            mtype: TYPE_CON,
            code: CODE_POST,
            message_id: 1,
            token: vec![],
            options,
            payload: payload.to_vec(),
        }
        .encode()
    }

    #[test]
    fn unwrap_errors() {
        let cf = (OPTION_CONTENT_FORMAT, vec![42]);
        let path = |p: &str| (OPTION_URI_PATH, p.as_bytes().to_vec());
        assert_eq!(coap_unwrap(&with(vec![path("other"), cf.clone()], b"x")), Err(CoapError::WrongPath));
        assert_eq!(
            coap_unwrap(&with(vec![path("tip"), (OPTION_CONTENT_FORMAT, vec![50])], b"x")),
            Err(CoapError::WrongContentFormat)
        );
        assert_eq!(coap_unwrap(&with(vec![path("tip"), cf.clone()], b"")), Err(CoapError::NoPayload));
        assert!(matches!(coap_unwrap(b"\x00\x01"), Err(CoapError::NotCoap(_))));
        assert!(matches!(coap_unwrap(b"hello world"), Err(CoapError::NotCoap(_))));
    }

    #[test]
    fn extended_option_lengths() {
        let long = vec![7u8; 300];
        let m = CoapMessage {
            mtype: TYPE_NON,
            code: CODE_POST,
            message_id: 9,
            token: vec![1; 8],
            options: vec![(OPTION_URI_PATH, b"tip".to_vec()), (2048, long.clone()), (60, vec![1; 20])],
            payload: vec![1, 2, 3],
        };
        let back = CoapMessage::decode(&m.encode()).unwrap();
        assert_eq!(back.option(2048).next().unwrap(), long.as_slice());
        assert_eq!(back.option(60).next().unwrap(), &[1u8; 20]);
        assert_eq!(back.payload, [1, 2, 3]);
    }
}
