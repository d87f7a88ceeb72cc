// SPDX-License-Identifier: Apache-2.0

//! The miniature guest kit: a deterministic instruction set, an assembler
//! for scenario-authored guest programs, and a disassembler that round-trips.
//!
//! Guests are not real machine code. Each program is a flat array of typed
//! instructions; the guest program counter is the flat index, which is what
//! lands in `hu_vpc` on a VM exit — exact restart semantics with no decode
//! ambiguity. Loops are counted markers rather than branches, and an operand
//! may be an affine expression in `IDX`, the number of *completed* iterations
//! of the innermost enclosing loop: `LOAD 0x1000000+IDX*4096 R0` touches a
//! fresh page every iteration, which is how the fault microbenchmarks are
//! written.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::mmu::{Perms, ADDR_SPACE_SIZE};

/// Register count of the guest machine (`R0`..`R7`).
pub const NUM_REGS: usize = 8;

/// An operand of the form `base + IDX*scale` (`scale` may be zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddrExpr {
    pub base: u64,
    pub scale: u64,
}

impl AddrExpr {
    pub const fn constant(base: u64) -> AddrExpr {
        AddrExpr { base, scale: 0 }
    }

    /// Value for the current innermost-loop iteration count.
    pub fn eval(&self, idx: u64) -> u64 {
        self.base.wrapping_add(idx.wrapping_mul(self.scale))
    }
}

impl fmt::Display for AddrExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.base, self.scale) {
            (b, 0) => write!(f, "{b:#x}"),
            (0, s) => write!(f, "IDX*{s:#x}"),
            (b, s) => write!(f, "{b:#x}+IDX*{s:#x}"),
        }
    }
}

/// One flat instruction. Loop bodies sit between their `LoopStart` and
/// `LoopEnd` markers, whose indices link both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    /// Guest-virtual load into a register (one byte, zero-extended).
    Load { addr: AddrExpr, reg: u8 },
    /// Guest-virtual store of a register's low byte.
    Store { addr: AddrExpr, reg: u8 },
    /// Device-window load, addressed by GPA (stage-1 is bypassed: the window
    /// models an uncached identity-mapped device aperture).
    MmioLoad { addr: AddrExpr, reg: u8 },
    /// Device-window store.
    MmioStore { addr: AddrExpr, reg: u8 },
    /// Trap to the hypervisor with a call number; `arg` goes in `R0` and the
    /// handler's return value comes back in `R0`.
    Hypercall { nr: u64, arg: u64 },
    /// Wait for interrupt: no-op when an interrupt is already pending,
    /// otherwise a sensitive-instruction VM exit that parks the vCPU.
    Wfi,
    /// Acknowledge the highest-priority pending virtual interrupt.
    IrqAck,
    /// Head of a counted loop; executing it with a zero count jumps past
    /// `end_idx`.
    LoopStart { count: u64, end_idx: usize },
    /// Tail of a counted loop; jumps back to `start_idx + 1` until the count
    /// is exhausted.
    LoopEnd { start_idx: usize },
    /// Power off the vCPU.
    Halt,
    Nop,
}

/// One live loop: the guest keeps a stack of these, and `IDX` reads the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopFrame {
    pub start_idx: usize,
    pub count: u64,
    pub completed: u64,
}

/// Stage-1 configuration a guest program declares.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum S1Mode {
    /// No stage-1 table: guest-virtual addresses are guest-physical.
    #[default]
    Off,
    /// A stage-1 table exists and the in-guest paging stub identity-maps
    /// faulting addresses on demand.
    Identity,
    /// Explicit `gva -> gpa` mappings installed by the paging stub at boot
    /// (plus demand identity for anything else).
    Explicit(Vec<(u64, u64, Perms)>),
}

/// Receive-ring declaration: the paging stub sets the ring up before the
/// benchmark window opens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RxRingDecl {
    pub device: String,
    pub queue_size: u64,
    pub buf_len: u64,
}

/// An assembled guest program.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub instrs: Vec<Instr>,
    pub s1_mode: S1Mode,
    pub rx_rings: Vec<RxRingDecl>,
    /// Blobs the hypervisor copies into guest RAM at boot: `(gpa, bytes)`.
    pub data: Vec<(u64, Vec<u8>)>,
}

fn asm_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Assembly { line, msg: msg.into() }
}

fn parse_num(tok: &str, env: &BTreeMap<String, u64>, line: usize) -> Result<u64> {
    if let Some(name) = tok.strip_prefix('$') {
        return env
            .get(name)
            .copied()
            .ok_or_else(|| asm_err(line, format!("undefined parameter `${name}`")));
    }
    let clean = tok.replace('_', "");
    let parsed = if let Some(hex) = clean.strip_prefix("0x").or_else(|| clean.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        clean.parse::<u64>()
    };
    parsed.map_err(|_| asm_err(line, format!("bad number `{tok}`")))
}

fn parse_expr(tok: &str, env: &BTreeMap<String, u64>, line: usize) -> Result<AddrExpr> {
    let parse_term = |t: &str| -> Result<(u64, u64)> {
        // A term is either `IDX*scale`, bare `IDX`, or a number.
        if let Some(rest) = t.strip_prefix("IDX") {
            let scale = match rest.strip_prefix('*') {
                Some(s) => parse_num(s, env, line)?,
                None if rest.is_empty() => 1,
                _ => return Err(asm_err(line, format!("bad operand term `{t}`"))),
            };
            Ok((0, scale))
        } else {
            Ok((parse_num(t, env, line)?, 0))
        }
    };
    let mut base = 0u64;
    let mut scale = 0u64;
    for term in tok.split('+') {
        let (b, s) = parse_term(term)?;
        base = base
            .checked_add(b)
            .ok_or_else(|| asm_err(line, format!("operand `{tok}` overflows")))?;
        if s != 0 && scale != 0 {
            return Err(asm_err(line, format!("operand `{tok}` has two IDX terms")));
        }
        scale += s;
    }
    Ok(AddrExpr { base, scale })
}

fn parse_reg(tok: &str, line: usize) -> Result<u8> {
    let idx = tok
        .strip_prefix('R')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| (n as usize) < NUM_REGS)
        .ok_or_else(|| asm_err(line, format!("bad register `{tok}` (use R0..R{})", NUM_REGS - 1)))?;
    Ok(idx)
}

fn check_addr(expr: AddrExpr, line: usize) -> Result<AddrExpr> {
    if expr.base >= ADDR_SPACE_SIZE {
        return Err(asm_err(line, format!("address {:#x} beyond the 39-bit guest space", expr.base)));
    }
    Ok(expr)
}

/// Assembles guest source. `env` supplies `$NAME` parameter values (for
/// example the scenario's iteration count).
///
/// Syntax, one statement per line (`;` starts a comment):
///
/// ```text
/// .s1 identity                     ; or: .s1 off | .s1 map <gva> <gpa> <perms>
/// .rxring net0 256 2048            ; device, queue size, buffer bytes
/// .data 0x3000 de ad be ef         ; bytes placed at a GPA before boot
/// LOOP $ITER
///   LOAD 0x1000000+IDX*4096 R0
///   SEND_VIPI 1                    ; sugar for HYPERCALL 1 <target>
/// END
/// HALT
/// ```
pub fn assemble(source: &str, env: &BTreeMap<String, u64>) -> Result<Program> {
    let mut prog = Program::default();
    let mut loop_stack: Vec<usize> = Vec::new();
    let mut s1_maps: Vec<(u64, u64, Perms)> = Vec::new();

    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let toks: Vec<&str> = text.split_whitespace().collect();
        let argc = toks.len() - 1;
        let want = |n: usize| -> Result<()> {
            if argc == n {
                Ok(())
            } else {
                Err(asm_err(line, format!("`{}` takes {n} operand(s), got {argc}", toks[0])))
            }
        };
        match toks[0] {
            ".s1" => match toks.get(1).copied() {
                Some("off") => prog.s1_mode = S1Mode::Off,
                Some("identity") => prog.s1_mode = S1Mode::Identity,
                Some("map") => {
                    want(4)?;
                    let gva = parse_num(toks[2], env, line)?;
                    let gpa = parse_num(toks[3], env, line)?;
                    let perms: Perms = toks[4]
                        .parse()
                        .map_err(|e: Error| asm_err(line, e.to_string()))?;
                    s1_maps.push((gva, gpa, perms));
                }
                _ => return Err(asm_err(line, ".s1 wants `off`, `identity`, or `map`")),
            },
            ".rxring" => {
                want(3)?;
                let queue_size = parse_num(toks[2], env, line)?;
                if queue_size == 0 || queue_size > 4096 || !queue_size.is_power_of_two() {
                    return Err(asm_err(line, "ring size must be a power of two in 1..=4096"));
                }
                prog.rx_rings.push(RxRingDecl {
                    device: toks[1].to_string(),
                    queue_size,
                    buf_len: parse_num(toks[3], env, line)?,
                });
            }
            ".data" => {
                if argc < 2 {
                    return Err(asm_err(line, ".data wants a GPA and at least one byte"));
                }
                let gpa = parse_num(toks[1], env, line)?;
                let bytes = toks[2..]
                    .iter()
                    .map(|t| {
                        u8::from_str_radix(t, 16)
                            .map_err(|_| asm_err(line, format!("bad data byte `{t}`")))
                    })
                    .collect::<Result<Vec<u8>>>()?;
                prog.data.push((gpa, bytes));
            }
            "LOAD" | "STORE" | "MMIO_LOAD" | "MMIO_STORE" => {
                want(2)?;
                let addr = check_addr(parse_expr(toks[1], env, line)?, line)?;
                let reg = parse_reg(toks[2], line)?;
                prog.instrs.push(match toks[0] {
                    "LOAD" => Instr::Load { addr, reg },
                    "STORE" => Instr::Store { addr, reg },
                    "MMIO_LOAD" => Instr::MmioLoad { addr, reg },
                    _ => Instr::MmioStore { addr, reg },
                });
            }
            "HYPERCALL" => {
                if argc == 0 || argc > 2 {
                    return Err(asm_err(line, "HYPERCALL wants a number and an optional argument"));
                }
                let nr = parse_num(toks[1], env, line)?;
                let arg = if argc == 2 { parse_num(toks[2], env, line)? } else { 0 };
                prog.instrs.push(Instr::Hypercall { nr, arg });
            }
            "SEND_VIPI" => {
                want(1)?;
                let target = parse_num(toks[1], env, line)?;
                prog.instrs.push(Instr::Hypercall { nr: super::hv::HC_VIPI, arg: target });
            }
            "WFI" => {
                want(0)?;
                prog.instrs.push(Instr::Wfi);
            }
            "IRQ_ACK" => {
                want(0)?;
                prog.instrs.push(Instr::IrqAck);
            }
            "HALT" => {
                want(0)?;
                prog.instrs.push(Instr::Halt);
            }
            "NOP" => {
                want(0)?;
                prog.instrs.push(Instr::Nop);
            }
            "LOOP" => {
                want(1)?;
                let count = parse_num(toks[1], env, line)?;
                loop_stack.push(prog.instrs.len());
                prog.instrs.push(Instr::LoopStart { count, end_idx: usize::MAX });
            }
            "END" => {
                want(0)?;
                let start_idx = loop_stack
                    .pop()
                    .ok_or_else(|| asm_err(line, "END without a matching LOOP"))?;
                let end_idx = prog.instrs.len();
                prog.instrs.push(Instr::LoopEnd { start_idx });
                match &mut prog.instrs[start_idx] {
                    Instr::LoopStart { end_idx: e, .. } => *e = end_idx,
                    _ => unreachable!(),
                }
            }
            other => return Err(asm_err(line, format!("unknown mnemonic `{other}`"))),
        }
    }
    if let Some(start) = loop_stack.pop() {
        return Err(asm_err(source.lines().count(), format!("LOOP at instruction {start} never closed")));
    }
    if !s1_maps.is_empty() {
        prog.s1_mode = S1Mode::Explicit(s1_maps);
    }
    Ok(prog)
}

/// Renders a program back to assemblable source. `assemble(disassemble(p))`
/// reproduces `p` exactly (parameters are already substituted, and
/// `SEND_VIPI` stays in its desugared `HYPERCALL` form).
pub fn disassemble(prog: &Program) -> String {
    let mut out = String::new();
    match &prog.s1_mode {
        S1Mode::Off => {}
        S1Mode::Identity => out.push_str(".s1 identity\n"),
        S1Mode::Explicit(maps) => {
            for (gva, gpa, perms) in maps {
                out.push_str(&format!(".s1 map {gva:#x} {gpa:#x} {perms}\n"));
            }
        }
    }
    for r in &prog.rx_rings {
        out.push_str(&format!(".rxring {} {} {}\n", r.device, r.queue_size, r.buf_len));
    }
    for (gpa, bytes) in &prog.data {
        out.push_str(&format!(".data {gpa:#x}"));
        for b in bytes {
            out.push_str(&format!(" {b:02x}"));
        }
        out.push('\n');
    }
    let mut depth = 0usize;
    for instr in &prog.instrs {
        if matches!(instr, Instr::LoopEnd { .. }) {
            depth = depth.saturating_sub(1);
        }
        for _ in 0..depth {
            out.push_str("  ");
        }
        match instr {
            Instr::Load { addr, reg } => out.push_str(&format!("LOAD {addr} R{reg}\n")),
            Instr::Store { addr, reg } => out.push_str(&format!("STORE {addr} R{reg}\n")),
            Instr::MmioLoad { addr, reg } => out.push_str(&format!("MMIO_LOAD {addr} R{reg}\n")),
            Instr::MmioStore { addr, reg } => out.push_str(&format!("MMIO_STORE {addr} R{reg}\n")),
            Instr::Hypercall { nr, arg } => out.push_str(&format!("HYPERCALL {nr} {arg:#x}\n")),
            Instr::Wfi => out.push_str("WFI\n"),
            Instr::IrqAck => out.push_str("IRQ_ACK\n"),
            Instr::LoopStart { count, .. } => {
                out.push_str(&format!("LOOP {count}\n"));
                depth += 1;
            }
            Instr::LoopEnd { .. } => out.push_str("END\n"),
            Instr::Halt => out.push_str("HALT\n"),
            Instr::Nop => out.push_str("NOP\n"),
        }
    }
    out
}
