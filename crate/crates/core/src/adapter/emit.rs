//! WebAssembly binary and text emission for formula ASTs.

use super::formula::{BinOp, Expr, MAX_DEPTH};
use super::AdapterError;

pub const WASM_MAGIC: [u8; 4] = *b"\0asm";
pub const WASM_VERSION: [u8; 4] = [1, 0, 0, 0];
pub const TRANSFORM_EXPORT: &str = "transform";
pub const BUFFER_EXPORT: &str = "transform_buf";
pub const MEMORY_EXPORT: &str = "memory";

const SEC_TYPE: u8 = 1;
const SEC_FUNCTION: u8 = 3;
const SEC_MEMORY: u8 = 5;
const SEC_EXPORT: u8 = 7;
const SEC_CODE: u8 = 10;

const VAL_I32: u8 = 0x7F;
const VAL_I64: u8 = 0x7E;
const VAL_F32: u8 = 0x7D;
const VAL_F64: u8 = 0x7C;

const OP_END: u8 = 0x0B;
const OP_LOCAL_GET: u8 = 0x20;
const OP_I64_CONST: u8 = 0x42;
const OP_F32_CONST: u8 = 0x43;
const OP_F64_CONST: u8 = 0x44;
const OP_I64_OR: u8 = 0x84;
const OP_I64_SHL: u8 = 0x86;
const OP_I64_EXTEND_I32_U: u8 = 0xAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Width {
    F32,
    F64,
}

impl Width {
    pub fn name(self) -> &'static str {
        match self {
            Width::F32 => "f32",
            Width::F64 => "f64",
        }
    }

    fn valtype(self) -> u8 {
        match self {
            Width::F32 => VAL_F32,
            Width::F64 => VAL_F64,
        }
    }

    fn opcode(self, op: BinOp) -> u8 {
        match (self, op) {
            (Width::F32, BinOp::Add) => 0x92,
            (Width::F32, BinOp::Sub) => 0x93,
            (Width::F32, BinOp::Mul) => 0x94,
            (Width::F32, BinOp::Div) => 0x95,
            (Width::F64, BinOp::Add) => 0xA0,
            (Width::F64, BinOp::Sub) => 0xA1,
            (Width::F64, BinOp::Mul) => 0xA2,
            (Width::F64, BinOp::Div) => 0xA3,
        }
    }

    fn neg_opcode(self) -> u8 {
        match self {
            Width::F32 => 0x8C,
            Width::F64 => 0x9A,
        }
    }
}

fn op_mnemonic(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    }
}

pub fn uleb(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn sleb(out: &mut Vec<u8>, mut v: i64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        let done = (v == 0 && byte & 0x40 == 0) || (v == -1 && byte & 0x40 != 0);
        if done {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn name(out: &mut Vec<u8>, s: &str) {
    uleb(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn section(out: &mut Vec<u8>, id: u8, body: &[u8]) {
    out.push(id);
    uleb(out, body.len() as u64);
    out.extend_from_slice(body);
}

fn func_type(params: &[u8], results: &[u8]) -> Vec<u8> {
    let mut t = vec![0x60];
    uleb(&mut t, params.len() as u64);
    t.extend_from_slice(params);
    uleb(&mut t, results.len() as u64);
    t.extend_from_slice(results);
    t
}

fn code_entry(instructions: &[u8]) -> Vec<u8> {
    // No locals beyond the parameters.
    let mut body = vec![0x00];
    body.extend_from_slice(instructions);
    body.push(OP_END);
    let mut entry = Vec::new();
    uleb(&mut entry, body.len() as u64);
    entry.extend_from_slice(&body);
    entry
}

fn const_text(width: Width, c: f64) -> String {
    let s = match width {
        Width::F32 => format!("{:?}", c as f32),
        Width::F64 => format!("{c:?}"),
    };
    s.replace("NaN", "nan")
}

fn lower(expr: &Expr, width: Width, code: &mut Vec<u8>, text: &mut Vec<String>) {
    match expr {
        Expr::Var => {
            code.extend_from_slice(&[OP_LOCAL_GET, 0]);
            text.push("local.get 0".into());
        }
        Expr::Const(c) => {
            match width {
                Width::F32 => {
                    code.push(OP_F32_CONST);
                    code.extend_from_slice(&(*c as f32).to_le_bytes());
                }
                Width::F64 => {
                    code.push(OP_F64_CONST);
                    code.extend_from_slice(&c.to_le_bytes());
                }
            }
            text.push(format!("{}.const {}", width.name(), const_text(width, *c)));
        }
        Expr::Neg(e) => {
            lower(e, width, code, text);
            code.push(width.neg_opcode());
            text.push(format!("{}.neg", width.name()));
        }
        Expr::Binary(op, l, r) => {
            lower(l, width, code, text);
            lower(r, width, code, text);
            code.push(width.opcode(*op));
            text.push(format!("{}.{}", width.name(), op_mnemonic(*op)));
        }
    }
}

/// Emitted scalar module: binary and equivalent text listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedModule {
    pub wasm: Vec<u8>,
    pub text: String,
}

pub fn emit_module(expr: &Expr, width: Width) -> Result<EmittedModule, AdapterError> {
    let depth = expr.depth();
    if depth > MAX_DEPTH {
        return Err(AdapterError::DepthExceeded(depth));
    }
    let mut code = Vec::new();
    let mut lines = Vec::new();
    lower(expr, width, &mut code, &mut lines);

    let mut wasm = Vec::new();
    wasm.extend_from_slice(&WASM_MAGIC);
    wasm.extend_from_slice(&WASM_VERSION);

    let mut types = vec![1];
    types.extend(func_type(&[width.valtype()], &[width.valtype()]));
    section(&mut wasm, SEC_TYPE, &types);
    section(&mut wasm, SEC_FUNCTION, &[1, 0]);
    let mut exports = vec![1];
    name(&mut exports, TRANSFORM_EXPORT);
    exports.extend_from_slice(&[0x00, 0]);
    section(&mut wasm, SEC_EXPORT, &exports);
    let mut codesec = vec![1];
    codesec.extend(code_entry(&code));
    section(&mut wasm, SEC_CODE, &codesec);

    let w = width.name();
    let mut text = format!("(module\n  (func (export \"{TRANSFORM_EXPORT}\") (param {w}) (result {w})");
    for l in &lines {
        text.push_str("\n    ");
        text.push_str(l);
    }
    text.push_str(")\n)\n");
    Ok(EmittedModule { wasm, text })
}

/// A buffer-ABI module that hands its input straight back: exports one
/// page of memory and `transform_buf(offset, length) -> offset << 32 | length`.
pub fn emit_buffer_identity() -> EmittedModule {
    let mut wasm = Vec::new();
    wasm.extend_from_slice(&WASM_MAGIC);
    wasm.extend_from_slice(&WASM_VERSION);
    let mut types = vec![1];
    types.extend(func_type(&[VAL_I32, VAL_I32], &[VAL_I64]));
    section(&mut wasm, SEC_TYPE, &types);
    section(&mut wasm, SEC_FUNCTION, &[1, 0]);
    section(&mut wasm, SEC_MEMORY, &[1, 0x00, 1]);
    let mut exports = vec![2];
    name(&mut exports, MEMORY_EXPORT);
    exports.extend_from_slice(&[0x02, 0]);
    name(&mut exports, BUFFER_EXPORT);
    exports.extend_from_slice(&[0x00, 0]);
    section(&mut wasm, SEC_EXPORT, &exports);
    let mut shift = vec![OP_I64_CONST];
    sleb(&mut shift, 32);
    let mut code = vec![OP_LOCAL_GET, 0, OP_I64_EXTEND_I32_U];
    code.extend(shift);
    code.extend_from_slice(&[OP_I64_SHL, OP_LOCAL_GET, 1, OP_I64_EXTEND_I32_U, OP_I64_OR]);
    let mut codesec = vec![1];
    codesec.extend(code_entry(&code));
    section(&mut wasm, SEC_CODE, &codesec);
    let text = format!(
        "(module\n  (memory (export \"{MEMORY_EXPORT}\") 1)\n  (func (export \"{BUFFER_EXPORT}\") (param i32 i32) (result i64)\n    local.get 0\n    i64.extend_i32_u\n    i64.const 32\n    i64.shl\n    local.get 1\n    i64.extend_i32_u\n    i64.or)\n)\n"
    );
    EmittedModule { wasm, text }
}
