use rand::Rng;

/// Mutation operators, picked uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    BitFlip,
    Splice,
    Duplicate,
    Truncate,
    Substitute,
}

pub const MUTATIONS: [Mutation; 5] = [
    Mutation::BitFlip,
    Mutation::Splice,
    Mutation::Duplicate,
    Mutation::Truncate,
    Mutation::Substitute,
];

const PRINTABLE: std::ops::Range<u8> = 0x20..0x7f;

fn printable(rng: &mut impl Rng) -> u8 {
    rng.random_range(PRINTABLE)
}

fn class(b: u8) -> u8 {
    match b {
        b'0'..=b'9' | b'a'..=b'z' | b'A'..=b'Z' | b'_' => 0,
        b' ' | b'\t' | b'\n' | b'\r' => 1,
        _ => 2,
    }
}

/// Byte range of the token containing `at`: a run of word characters or
/// whitespace, or a single other byte.
fn token_at(seed: &[u8], at: usize) -> (usize, usize) {
    let c = class(seed[at]);
    if c == 2 {
        return (at, at + 1);
    }
    let mut start = at;
    while start > 0 && class(seed[start - 1]) == c {
        start -= 1;
    }
    let mut end = at + 1;
    while end < seed.len() && class(seed[end]) == c {
        end += 1;
    }
    (start, end)
}

pub fn apply(op: Mutation, seed: &[u8], donor: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    if seed.is_empty() {
        let mut out = donor.to_vec();
        out.insert(rng.random_range(0..=out.len()), printable(rng));
        return out;
    }
    let mut out = seed.to_vec();
    match op {
        Mutation::BitFlip => {
            let i = rng.random_range(0..out.len());
            out[i] ^= 1 << rng.random_range(0..7);
        }
        Mutation::Splice => {
            let cut = rng.random_range(0..=out.len());
            out.truncate(cut);
            if !donor.is_empty() {
                let from = rng.random_range(0..donor.len());
                out.extend_from_slice(&donor[from..]);
            }
        }
        Mutation::Duplicate => {
            let (s, e) = token_at(seed, rng.random_range(0..seed.len()));
            out.splice(e..e, seed[s..e].iter().copied());
        }
        Mutation::Truncate => {
            out.truncate(rng.random_range(0..out.len()));
        }
        Mutation::Substitute => {
            let i = rng.random_range(0..out.len());
            out[i] = printable(rng);
        }
    }
    out
}

/// One random mutation of `seed`; `donor` feeds splicing. The result always
/// differs from `seed`.
pub fn mutate(seed: &[u8], donor: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    for _ in 0..8 {
        let op = MUTATIONS[rng.random_range(0..MUTATIONS.len())];
        let out = apply(op, seed, donor, rng);
        if out != seed {
            return out;
        }
    }
    let mut out = seed.to_vec();
    out.push(printable(rng));
    out
}
