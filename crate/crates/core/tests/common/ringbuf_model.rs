//! Exhaustive model check of the ring buffer helpers.

use bpfbox::executor::Trap;
use bpfbox::helpers::{ringbuf_commit, ringbuf_discard, ringbuf_reserve, KernelRingBuffer};
use bpfbox::sandbox::{LayoutSpec, Sandbox};

pub const CAPACITY: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Reserve(u64),
    Write(usize, u8),
    Commit(usize),
    Discard(usize),
    /// Commit an address that was never handed out.
    CommitUnknown,
    /// Commit a reservation's address plus an offset.
    CommitDerived(usize),
}

pub const ALPHABET: [Op; 10] = [
    Op::Reserve(8),
    Op::Reserve(4096),
    Op::Write(0, 0xa5),
    Op::Commit(0),
    Op::Discard(0),
    Op::Write(1, 0x5a),
    Op::Commit(1),
    Op::Discard(1),
    Op::CommitUnknown,
    Op::CommitDerived(0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Open,
    Committed,
    Discarded,
}

#[derive(Debug, Default)]
struct Model {
    reservations: Vec<(u64, u64, State, Vec<u8>)>,
    records: Vec<Vec<u8>>,
    used: u64,
}

/// Apply `ops` to the helpers and to a plain model side by side; return a
/// description of the first disagreement.
pub fn check_sequence(ops: &[Op]) -> Result<(), String> {
    let mut sb = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
    let mut rings = vec![KernelRingBuffer::new(CAPACITY)];
    let mut m = Model::default();

    for (step, &op) in ops.iter().enumerate() {
        let fail = |what: String| Err(format!("{ops:?} step {step}: {what}"));
        match op {
            Op::Reserve(size) => {
                let addr = ringbuf_reserve(&mut sb, &mut rings, 0, size);
                if m.used + size <= CAPACITY {
                    if addr == 0 {
                        return fail("reserve failed with room left".into());
                    }
                    m.used += size;
                    m.reservations.push((addr, size, State::Open, vec![0; size as usize]));
                } else if addr != 0 {
                    return fail("reserve succeeded past capacity".into());
                }
            }
            Op::Write(i, byte) => {
                let Some(r) = m.reservations.get_mut(i) else { continue };
                r.3[0] = byte;
                sb.write(r.0, &[byte]).unwrap();
            }
            Op::Commit(i) | Op::Discard(i) => {
                let Some(r) = m.reservations.get_mut(i) else { continue };
                let got = if matches!(op, Op::Commit(_)) {
                    ringbuf_commit(&mut sb, &mut rings, r.0)
                } else {
                    ringbuf_discard(&mut sb, &mut rings, r.0)
                };
                match (r.2, got) {
                    (State::Open, Ok(())) => {
                        if matches!(op, Op::Commit(_)) {
                            r.2 = State::Committed;
                            m.records.push(r.3.clone());
                        } else {
                            r.2 = State::Discarded;
                            m.used -= r.1;
                        }
                    }
                    (State::Committed | State::Discarded, Err(Trap::InvalidReservation { address }))
                        if address == r.0 => {}
                    (s, g) => return fail(format!("{op:?} on {s:?} gave {g:?}")),
                }
            }
            Op::CommitUnknown => {
                let addr = sb.heap_range().end - 8;
                if ringbuf_commit(&mut sb, &mut rings, addr) != Err(Trap::InvalidReservation { address: addr }) {
                    return fail("unknown address accepted".into());
                }
            }
            Op::CommitDerived(i) => {
                let Some(r) = m.reservations.get(i) else { continue };
                let addr = r.0 + 4;
                if ringbuf_commit(&mut sb, &mut rings, addr) != Err(Trap::InvalidReservation { address: addr }) {
                    return fail("derived address accepted".into());
                }
            }
        }
        let rb = &rings[0];
        if rb.records() != m.records.as_slice() {
            return fail(format!("records {:?} != model {:?}", rb.records(), m.records));
        }
        if rb.used() != m.used {
            return fail(format!("used {} != model {}", rb.used(), m.used));
        }
        let open = m.reservations.iter().filter(|r| r.2 == State::Open).count();
        if rb.open_reservations() != open {
            return fail(format!("open {} != model {open}", rb.open_reservations()));
        }
    }
    Ok(())
}

/// Every sequence over [`ALPHABET`] up to `max_len` ops. Returns how many
/// sequences were checked.
pub fn check_all(max_len: u32) -> Result<usize, String> {
    let mut checked = 0;
    for len in 0..=max_len {
        let total = ALPHABET.len().pow(len);
        let mut ops = Vec::with_capacity(len as usize);
        for mut n in 0..total {
            ops.clear();
            for _ in 0..len {
                ops.push(ALPHABET[n % ALPHABET.len()]);
                n /= ALPHABET.len();
            }
            check_sequence(&ops)?;
            checked += 1;
        }
    }
    Ok(checked)
}
