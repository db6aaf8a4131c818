//! Acceptance suite. Runs every headline criterion, prints one PASS/FAIL line
//! each, and exits nonzero when any fails. Oracles here are written
//! independently of the library code they check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cotmed::effects::{
    build_outcome_table, compute_effects, direct_effect, direct_effect_exact, flip_rate, indirect_effect,
    indirect_effect_exact, permutation_pvalue, Condition, EffectConfig, EffectMode, OutcomeRecord, OutcomeTable,
    PermutationMethod,
};
use cotmed::intervene::{apply_swap, swap_operands, Provenance, SwapConfig, SwapRejection};
use cotmed::model::{validate_problem, RawProblem};
use cotmed::report::{effects_table, percent, pvalue_bucket};
use cotmed::scores::{dpo_loss, implicit_reward, las, margin_rank_loss, preference_prob, softplus, PreferenceScoreInput, SimulatorRecord};
use cotmed::{Answer, Decimal, Problem};
use cotmed_mock::{MockScript, MockServer};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("runtime {elapsed:?} exceeds {limit:?}"))
}

// ---------------------------------------------------------------------------
// Outcome-table helpers

fn record(id: &str, condition: Condition, answer: Option<bool>, correct: bool, model: &str) -> OutcomeRecord {
    OutcomeRecord {
        problem_id: id.to_string(),
        condition,
        answer: answer.map(Answer::Binary),
        extracted: answer.is_some(),
        correct,
        model: model.to_string(),
        chain_generator: model.to_string(),
    }
}

/// Table from per-item correctness triples; answers are `Some(correct)`.
fn table_of(cells: &[[bool; 3]], model: &str) -> OutcomeTable {
    let cell = |c: Condition, k: usize| -> Vec<OutcomeRecord> {
        cells
            .iter()
            .enumerate()
            .map(|(i, t)| record(&format!("item{i:05}"), c, Some(t[k]), t[k], model))
            .collect()
    };
    build_outcome_table(&cell(Condition::X0R0, 0), &cell(Condition::X0R1, 1), &cell(Condition::X1R0, 2)).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Effect estimators against a brute-force recount

fn effect_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..=12usize);
        let cells: Vec<[bool; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        // Independent recount: walk the raw triples.
        let (mut a, mut b, mut c) = (0i64, 0i64, 0i64);
        for t in &cells {
            a += t[0] as i64;
            b += t[1] as i64;
            c += t[2] as i64;
        }
        let ie = BigRational::new(BigInt::from(a - b), BigInt::from(n as i64));
        let de = BigRational::new(BigInt::from(a - c), BigInt::from(n as i64));
        let table = table_of(&cells, "m");
        check(indirect_effect_exact(&table) == ie, || format!("IE mismatch on {cells:?}"))?;
        check(direct_effect_exact(&table) == de, || format!("DE mismatch on {cells:?}"))?;
        check(indirect_effect(&table) == ie.to_f64().unwrap(), || "IE float mismatch".into())?;
        check(direct_effect(&table) == de.to_f64().unwrap(), || "DE float mismatch".into())?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("200 tables exact, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. Permutation test against literal sign-flip enumeration

/// Walks all 2^n sign assignments in Gray-code order and counts those whose
/// |sum| reaches the observed |sum|.
fn enumerate_pvalue(d: &[i64]) -> f64 {
    let n = d.len();
    let observed: i64 = d.iter().sum::<i64>().abs();
    let mut signs = vec![1i64; n];
    let mut sum: i64 = d.iter().sum();
    let mut hits = 0u64;
    for k in 0u64..(1u64 << n) {
        if k > 0 {
            let i = k.trailing_zeros() as usize;
            sum -= 2 * signs[i] * d[i];
            signs[i] = -signs[i];
        }
        if sum.abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn pair_from_diffs(d: &[i64]) -> (Vec<bool>, Vec<bool>) {
    d.iter()
        .enumerate()
        .map(|(i, &x)| match x {
            1 => (true, false),
            -1 => (false, true),
            _ => (i % 2 == 0, i % 2 == 0),
        })
        .unzip()
}

fn permutation_exactness() -> Outcome {
    let start = Instant::now();
    let mut checked = 0u64;
    let mut worst = 0.0f64;
    let mut compare = |a: &[bool], b: &[bool]| -> Result<(), String> {
        let d: Vec<i64> = a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64).collect();
        let got = permutation_pvalue(a, b, 0, 0, PermutationMethod::Exact).map_err(|e| e.to_string())?;
        let want = enumerate_pvalue(&d);
        worst = worst.max((got.p_value - want).abs());
        checked += 1;
        check((got.p_value - want).abs() <= 1e-12, || format!("{a:?} vs {b:?}: {} != {want}", got.p_value))
    };
    // Every (a, b) pair outright up to n = 6.
    for n in 1..=6usize {
        for bits in 0u64..(1 << (2 * n)) {
            let a: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let b: Vec<bool> = (0..n).map(|i| bits >> (n + i) & 1 == 1).collect();
            compare(&a, &b)?;
        }
    }
    // Every difference vector in {-1, 0, 1}^n for n = 7..=10. Tied pairs
    // (0,0) and (1,1) give the same difference, so this covers every
    // distinct test input.
    for n in 7..=10usize {
        let total = 3u64.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let d: Vec<i64> = (0..n)
                .map(|_| {
                    let x = (c % 3) as i64 - 1;
                    c /= 3;
                    x
                })
                .collect();
            let (a, b) = pair_from_diffs(&d);
            compare(&a, &b)?;
        }
    }

    // Monte-Carlo at 1e5 resamples against the enumeration.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mc_worst = 0.0f64;
    for trial in 0..12u64 {
        let d: Vec<i64> = (0..10).map(|_| rng.random_range(-1..=1)).collect();
        let (a, b) = pair_from_diffs(&d);
        let mc = permutation_pvalue(&a, &b, 100_000, trial, PermutationMethod::MonteCarlo).map_err(|e| e.to_string())?;
        let exact = enumerate_pvalue(&d);
        mc_worst = mc_worst.max((mc.p_value - exact).abs());
        check((mc.p_value - exact).abs() <= 0.01, || format!("MC {} vs exact {exact} on {d:?}", mc.p_value))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "{checked} inputs, max |exact diff| {worst:.1e}, max |MC diff| {mc_worst:.4}, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Closed forms

fn closed_forms() -> Outcome {
    let start = Instant::now();
    let input = |pw: f64, pl: f64, rw: f64, rl: f64, beta: f64| PreferenceScoreInput {
        lp_policy_w: pw,
        lp_policy_l: pl,
        lp_ref_w: rw,
        lp_ref_l: rl,
        beta,
    };
    let tie = dpo_loss(&input(-3.0, -3.0, -2.0, -2.0, 0.25)).unwrap();
    check((tie - std::f64::consts::LN_2).abs() <= 1e-9, || format!("tie loss {tie}"))?;
    // Δ = β((−1) − (−3)) − 0 = 2 with β = 1.
    let two = dpo_loss(&input(-1.0, -5.0, -3.0, -5.0, 1.0)).unwrap();
    let sp = (1.0f64 + (-2.0f64).exp()).ln();
    check((two - sp).abs() <= 1e-9 && (softplus(-2.0) - sp).abs() <= 1e-12, || format!("Δ=2 loss {two}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        // Dyadic inputs keep every product exact, so linearity must hold bit for bit.
        let lp = -(rng.random_range(0..4096) as f64) / 64.0;
        let lr = -(rng.random_range(0..4096) as f64) / 64.0;
        let beta = rng.random_range(1..64) as f64 / 64.0;
        let k = rng.random_range(1..8) as f64;
        check(implicit_reward(lp, lr, k * beta) == k * implicit_reward(lp, lr, beta), || {
            format!("linearity fails at lp={lp} lr={lr} beta={beta} k={k}")
        })?;
        let a: f64 = rng.random_range(-30.0..30.0);
        let b: f64 = rng.random_range(-30.0..30.0);
        let s = preference_prob(a, b) + preference_prob(b, a);
        check((s - 1.0).abs() <= 1e-12, || format!("antisymmetry: p({a},{b}) + p({b},{a}) = {s}"))?;
    }

    let hinge = [(3.0, -1, 1.0, 0.0), (0.25, -1, 1.0, 0.75), (0.0, -1, 0.0, 0.0)];
    for (margin, t, m, want) in hinge {
        let got = margin_rank_loss(margin, t, m).unwrap();
        check(got == want, || format!("hinge({margin}, {t}, {m}) = {got}, want {want}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("ln2, softplus(-2), linearity, antisymmetry, 3 hinge values; {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 4. Two-route DPO

fn two_route_dpo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let i = PreferenceScoreInput {
            lp_policy_w: rng.random_range(-60.0..0.0),
            lp_policy_l: rng.random_range(-60.0..0.0),
            lp_ref_w: rng.random_range(-60.0..0.0),
            lp_ref_l: rng.random_range(-60.0..0.0),
            beta: rng.random_range(0.01..1.0),
        };
        let direct = dpo_loss(&i).unwrap();
        let rw = i.beta * (i.lp_policy_w - i.lp_ref_w);
        let rl = i.beta * (i.lp_policy_l - i.lp_ref_l);
        let sigma = 1.0 / (1.0 + (-(rw - rl)).exp());
        let via_sigmoid = -sigma.ln();
        worst = worst.max((direct - via_sigmoid).abs());
        check((direct - via_sigmoid).abs() <= 1e-12, || format!("{i:?}: {direct} vs {via_sigmoid}"))?;
    }
    Ok(format!("1000 inputs, max diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Operand swap against a shunting-yard evaluator

/// Shunting-yard over exact rationals; `None` on division by zero.
fn eval_infix(expr: &str) -> Option<BigRational> {
    fn prec(op: char) -> u8 {
        if op == '+' || op == '-' {
            1
        } else {
            2
        }
    }
    fn apply(out: &mut Vec<BigRational>, op: char) -> Option<()> {
        let r = out.pop()?;
        let l = out.pop()?;
        out.push(match op {
            '+' => l + r,
            '-' => l - r,
            '*' => l * r,
            '/' => {
                if r.is_zero() {
                    return None;
                }
                l / r
            }
            _ => return None,
        });
        Some(())
    }
    let mut out: Vec<BigRational> = Vec::new();
    let mut ops: Vec<char> = Vec::new();
    let chars: Vec<char> = expr.chars().filter(|c| !c.is_whitespace()).collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
            let num: BigInt = format!("{int}{frac}").parse().ok()?;
            let den = num::pow(BigInt::from(10), frac.len());
            out.push(BigRational::new(num, den));
            continue;
        }
        match c {
            '(' => ops.push(c),
            ')' => {
                while let Some(op) = ops.pop() {
                    if op == '(' {
                        break;
                    }
                    apply(&mut out, op)?;
                }
            }
            _ => {
                while let Some(&top) = ops.last() {
                    if top != '(' && prec(top) >= prec(c) {
                        apply(&mut out, ops.pop()?)?;
                    } else {
                        break;
                    }
                }
                ops.push(c);
            }
        }
        i += 1;
    }
    while let Some(op) = ops.pop() {
        apply(&mut out, op)?;
    }
    out.pop()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FixtureKind {
    Plain,
    /// A leaf operand the question never states.
    Hidden,
    /// `a / (b - c)`, later forced to zero by an explicit map.
    ZeroDivisor,
}

struct Fixture {
    problem: Problem,
    kind: FixtureKind,
    /// Step templates over `{Ln}` leaves and `{Rn}` earlier results.
    steps: Vec<String>,
    leaves: Vec<i64>,
}

fn render_step(template: &str, leaves: &[String], results: &[String]) -> String {
    let mut s = template.to_string();
    for (i, v) in leaves.iter().enumerate() {
        s = s.replace(&format!("{{L{i}}}"), v);
    }
    for (i, v) in results.iter().enumerate() {
        s = s.replace(&format!("{{R{i}}}"), v);
    }
    s
}

fn rational_text(r: &BigRational) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        Decimal::from_rational(r.clone()).map(|d| d.to_string()).unwrap_or_else(|_| r.to_string())
    }
}

/// Evaluates the step templates with the given leaf values.
fn oracle_chain(steps: &[String], leaves: &[String]) -> Option<Vec<BigRational>> {
    let mut results: Vec<BigRational> = Vec::new();
    for step in steps {
        let texts: Vec<String> = results.iter().map(rational_text).collect();
        results.push(eval_infix(&render_step(step, leaves, &texts))?);
    }
    Some(results)
}

const NAMES: [&str; 8] = ["Ana", "Ben", "Chen", "Dara", "Eli", "Farah", "Gus", "Hana"];
const ITEMS: [&str; 6] = ["marbles", "stamps", "apples", "coins", "pencils", "shells"];

fn build_fixture(i: usize, rng: &mut ChaCha8Rng) -> Fixture {
    let kind = match i % 10 {
        0 => FixtureKind::Hidden,
        1 => FixtureKind::ZeroDivisor,
        _ => FixtureKind::Plain,
    };
    let name = NAMES[i % NAMES.len()];
    let item = ITEMS[i % ITEMS.len()];
    loop {
        let (steps, leaves, question): (Vec<String>, Vec<i64>, String) = match kind {
            FixtureKind::Plain => match i % 4 {
                0 => {
                    let (a, b, c) = (rng.random_range(2..40), rng.random_range(2..40), rng.random_range(2..9));
                    (
                        vec!["{L0}+{L1}".into(), "{R0}*{L2}".into()],
                        vec![a, b, c],
                        format!("{name} has {a} {item} and finds {b} more. Each is worth {c} points. How many points in total?"),
                    )
                }
                1 => {
                    let (a, b) = (rng.random_range(2..30), rng.random_range(2..12));
                    let c = rng.random_range(2..(a * b).min(99));
                    (
                        vec!["{L0}*{L1}".into(), "{R0}-{L2}".into()],
                        vec![a, b, c],
                        format!("{name} buys {a} boxes of {b} {item} and gives away {c}. How many are left?"),
                    )
                }
                2 => {
                    let (b, c) = (rng.random_range(2..12), rng.random_range(2..12));
                    let a = b * c * rng.random_range(1..5);
                    (
                        vec!["{L0}/({L1}*{L2})".into()],
                        vec![a, b, c],
                        format!("{name} shares {a} {item} among {b} tables of {c} friends. How many does each friend get?"),
                    )
                }
                _ => {
                    let (a, b, c, d) =
                        (rng.random_range(2..30), rng.random_range(2..30), rng.random_range(2..30), rng.random_range(2..6));
                    (
                        vec!["{L0}+{L1}".into(), "({R0}+{L2})*{L3}".into()],
                        vec![a, b, c, d],
                        format!(
                            "{name} collects {a} {item} on Monday, {b} on Tuesday and {c} on Wednesday, then repeats this {d} weeks. How many in all?"
                        ),
                    )
                }
            },
            FixtureKind::Hidden => {
                let a = 2 * rng.random_range(2..40);
                (
                    vec!["{L0}/{L1}".into(), "{L0}+{R0}".into()],
                    vec![a, 2],
                    format!("{name} had {a} {item} in April and half as many in May. How many altogether?"),
                )
            }
            FixtureKind::ZeroDivisor => {
                let c = rng.random_range(2..20);
                let b = c + rng.random_range(1..6);
                let a = (b - c) * rng.random_range(2..10);
                (
                    vec!["{L0}/({L1}-{L2})".into()],
                    vec![a, b, c],
                    format!("{name} packs {a} {item} into bags; each bag holds {b} minus {c} of them. How many bags?"),
                )
            }
        };
        // Keep leaves distinct and never equal to an earlier result, so every
        // number in the equations has one reading.
        let texts: Vec<String> = leaves.iter().map(|v| v.to_string()).collect();
        let Some(results) = oracle_chain(&steps, &texts) else { continue };
        let mut distinct = leaves.clone();
        distinct.sort();
        distinct.dedup();
        let collides = results[..results.len() - 1]
            .iter()
            .any(|r| leaves.iter().any(|l| BigRational::from_integer(BigInt::from(*l)) == *r));
        let well_formed = results.iter().all(|r| r.is_integer() && *r > BigRational::zero());
        if distinct.len() != leaves.len() || collides || !well_formed {
            continue;
        }
        let result_texts: Vec<String> = results.iter().map(rational_text).collect();
        let equations: Vec<String> = steps
            .iter()
            .enumerate()
            .map(|(k, s)| format!("{}={}", render_step(s, &texts, &result_texts[..k]), result_texts[k]))
            .collect();
        let raw: RawProblem = serde_json::from_value(json!({
            "id": format!("s{i:03}"),
            "task": "numeric",
            "question": question,
            "gold": result_texts.last().unwrap(),
            "meta": {"equations": equations},
        }))
        .unwrap();
        return Fixture {
            problem: validate_problem(raw).unwrap(),
            kind,
            steps,
            leaves,
        };
    }
}

fn check_accepted(fx: &Fixture, pair: &cotmed::intervene::InterventionPair) -> Result<(), String> {
    let Provenance::Swap { map, .. } = &pair.provenance else {
        return Err(format!("{}: swap provenance expected", fx.problem.id));
    };
    let new_leaves: Vec<String> = fx
        .leaves
        .iter()
        .map(|l| map.get(&l.to_string()).cloned().ok_or_else(|| format!("{}: leaf {l} not mapped", fx.problem.id)))
        .collect::<Result<_, _>>()?;
    let results = oracle_chain(&fx.steps, &new_leaves).ok_or_else(|| format!("{}: oracle divides by zero", fx.problem.id))?;
    let want = results.last().unwrap();
    let Answer::Numeric(got) = &pair.intervened_gold else {
        return Err(format!("{}: non-numeric gold", fx.problem.id));
    };
    check(got.as_rational() == want, || format!("{}: gold {got} but oracle {want}", fx.problem.id))?;
    for v in &new_leaves {
        check(pair.intervened_question.contains(v.as_str()), || {
            format!("{}: `{}` lacks operand {v}", fx.problem.id, pair.intervened_question)
        })?;
    }
    Ok(())
}

fn operand_swap() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fixtures: Vec<Fixture> = (0..100).map(|i| build_fixture(i, &mut rng)).collect();
    let cfg = SwapConfig::default();
    let (mut accepted, mut zero_rejected, mut hidden_rejected) = (0, 0, 0);
    for (i, fx) in fixtures.iter().enumerate() {
        let drawn = swap_operands(&fx.problem, 1000 + i as u64, &cfg);
        match fx.kind {
            FixtureKind::Hidden => {
                check(matches!(drawn, Err(SwapRejection::OperandNotFound(_))), || {
                    format!("{}: unlocatable operand not rejected: {drawn:?}", fx.problem.id)
                })?;
                hidden_rejected += 1;
            }
            FixtureKind::ZeroDivisor => {
                let b = Decimal::from_i64(fx.leaves[1]);
                let c = Decimal::from_i64(fx.leaves[2]);
                let map: BTreeMap<Decimal, Decimal> = [
                    (Decimal::from_i64(fx.leaves[0]), Decimal::from_i64(60)),
                    (b, Decimal::from_i64(7)),
                    (c, Decimal::from_i64(7)),
                ]
                .into_iter()
                .collect();
                let forced = apply_swap(&fx.problem, &map, &cfg);
                check(matches!(forced, Err(SwapRejection::DivisionByZero(_))), || {
                    format!("{}: zero divisor not rejected: {forced:?}", fx.problem.id)
                })?;
                zero_rejected += 1;
                if let Ok(pair) = &drawn {
                    check_accepted(fx, pair)?;
                    accepted += 1;
                }
            }
            FixtureKind::Plain => {
                if let Ok(pair) = &drawn {
                    check_accepted(fx, pair)?;
                    accepted += 1;
                }
            }
        }
    }
    check(accepted >= 60, || format!("only {accepted} swaps accepted; fixture too weak"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "{accepted} accepted swaps match oracle, {zero_rejected} zero-divisor and {hidden_rejected} unlocatable cases rejected, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// 6. End-to-end determinism through the binary

const SUBJECTS: [&str; 20] = [
    "a stone", "a cloud", "an anvil", "a leaf", "a brick", "a balloon", "a whale", "a snowflake", "a piano",
    "a soap bubble", "a bowling ball", "a dandelion seed", "a car", "a paperclip", "an elephant", "a hair",
    "a refrigerator", "a moth", "a cannonball", "a sheet of tissue",
];

fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut problems = String::new();
    let mut decisions = String::new();
    for (i, s) in SUBJECTS.iter().enumerate() {
        let heavy = i % 2 == 0;
        writeln!(
            problems,
            "{}",
            json!({"id": format!("q{i:02}"), "task": "binary", "question": format!("Is {s} heavier than a feather?"), "gold": if heavy {"yes"} else {"no"}})
        )
        .unwrap();
        let verdict = if i % 7 == 6 { "reject" } else { "accept" };
        writeln!(
            decisions,
            "{}",
            json!({"original_id": format!("q{i:02}"), "verdict": verdict, "decider": "fixture", "timestamp": "2026-01-01T00:00:00Z"})
        )
        .unwrap();
    }
    let p = dir.join("problems.jsonl");
    let d = dir.join("decisions.jsonl");
    std::fs::write(&p, problems).unwrap();
    std::fs::write(&d, decisions).unwrap();
    (p, d)
}

fn cotmed(endpoint: &str, cache: &Path, run: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cotmed"))
        .arg("--run")
        .arg(run)
        .arg("--cache-dir")
        .arg(cache)
        .arg("--endpoint")
        .arg(endpoint)
        .args(args)
        .env_remove("COTMED_ENDPOINT")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("cotmed {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline(endpoint: &str, cache: &Path, run: &Path, problems: &Path, decisions: &Path) -> Result<(), String> {
    let p = problems.to_str().unwrap();
    let r = |rel: &str| run.join(rel).to_string_lossy().into_owned();
    cotmed(endpoint, cache, run, &["intervene", "--task", "binary", "--in", p, "--generator", "mock-gpt"])?;
    cotmed(endpoint, cache, run, &["curate", "--decisions", decisions.to_str().unwrap()])?;
    cotmed(endpoint, cache, run, &["chains", "--mode", "factual", "--problems", p, "--model", "mock-lm"])?;
    cotmed(
        endpoint,
        cache,
        run,
        &["chains", "--mode", "counterfactual", "--problems", p, "--model", "mock-lm", "--intervened", &r("curated/interventions.jsonl")],
    )?;
    cotmed(
        endpoint,
        cache,
        run,
        &[
            "evaluate", "--problems", p, "--chains", &r("chains/factual.jsonl"), &r("chains/counterfactual.jsonl"),
            "--intervened", &r("curated/interventions.jsonl"), "--model", "mock-lm",
        ],
    )?;
    cotmed(endpoint, cache, run, &["effects", "--records", &r("records/outcomes_mock-lm.jsonl"), "--task", "fixture"])?;
    cotmed(endpoint, cache, run, &["report", "--reports", &r("reports/effects_natural_mock-lm.json")])
}

const ARTIFACTS: [&str; 8] = [
    "pending/interventions.jsonl",
    "curated/interventions.jsonl",
    "chains/factual.jsonl",
    "chains/counterfactual.jsonl",
    "records/outcomes_mock-lm.jsonl",
    "reports/effects_natural_mock-lm.json",
    "reports/effects_natural.txt",
    "reports/effects_natural.csv",
];

fn cache_stats(run: &Path) -> Result<(u64, u64, u64), String> {
    let (mut net, mut hits, mut misses) = (0, 0, 0);
    for stage in ["intervene", "chains", "evaluate"] {
        let text = std::fs::read_to_string(run.join("stages").join(format!("{stage}.json"))).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let c = &v["cache"];
        net += c["network_attempts"].as_u64().unwrap_or(0);
        hits += c["cache_hits"].as_u64().unwrap_or(0);
        misses += c["cache_misses"].as_u64().unwrap_or(0);
    }
    Ok((net, hits, misses))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let server = rt.block_on(MockServer::start(MockScript::synthetic())).map_err(|e| e.to_string())?;
    let endpoint = server.base_url();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (problems, decisions) = write_fixture(dir.path());
    let cache = dir.path().join("cache");
    let (first, second) = (dir.path().join("run1"), dir.path().join("run2"));

    pipeline(&endpoint, &cache, &first, &problems, &decisions)?;
    let after_first = server.request_count();
    check(after_first > 0, || "first run made no requests".into())?;
    pipeline(&endpoint, &cache, &second, &problems, &decisions)?;
    let delta = server.request_count() - after_first;
    check(delta == 0, || format!("second run sent {delta} requests to the mock"))?;

    for rel in ARTIFACTS {
        let a = std::fs::read(first.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let b = std::fs::read(second.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        check(a == b, || format!("{rel} differs between runs"))?;
    }
    let (net, hits, misses) = cache_stats(&second)?;
    check(net == 0 && misses == 0 && hits > 0, || {
        format!("second run cache: {hits} hits, {misses} misses, {net} network attempts")
    })?;
    let records = std::fs::read_to_string(first.join("records/outcomes_mock-lm.jsonl")).unwrap();
    let accepted = (0..SUBJECTS.len()).filter(|i| i % 7 != 6).count();
    let n = records.lines().count();
    check(n == 3 * accepted, || format!("expected {} outcome records, found {n}", 3 * accepted))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "{} artifacts identical, {after_first} live requests then 0, {hits}/{hits} cache hits, {elapsed:.2?}",
        ARTIFACTS.len()
    ))
}

// ---------------------------------------------------------------------------
// 7. Flip rate

fn flip_rate_fixture() -> Outcome {
    let ids: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
    let x0r0: Vec<_> = ids.iter().map(|id| record(id, Condition::X0R0, Some(true), true, "m")).collect();
    let x0r1: Vec<_> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let flipped = i < 3;
            record(id, Condition::X0R1, Some(!flipped), !flipped, "m")
        })
        .collect();
    let x1r0: Vec<_> = ids.iter().map(|id| record(id, Condition::X1R0, Some(true), false, "m")).collect();
    let table = build_outcome_table(&x0r0, &x0r1, &x1r0).map_err(|e| e.to_string())?;
    let f = flip_rate(&table).map_err(|e| e.to_string())?;
    check(f.rate == 0.30 && f.flipped == 3 && f.eligible == 10, || format!("{f:?}"))?;
    let shown = percent(f.rate);
    check(shown == "30.0", || format!("displayed as {shown}"))?;
    check(format!("{:.0}%", f.rate * 100.0) == "30%", || "integer display".into())?;
    Ok(format!("3/10 flips -> {} -> {shown}%", f.rate))
}

// ---------------------------------------------------------------------------
// 8. Golden report row

fn golden_row() -> Outcome {
    let cells: Vec<[bool; 3]> = (0..1000).map(|i| [i < 935, i < 535, i < 713]).collect();
    let table = table_of(&cells, "GPT-4");
    let cfg = EffectConfig::default();
    let natural = compute_effects(&table, "StrategyQA", "GPT-4", EffectMode::Natural, &cfg).map_err(|e| e.to_string())?;
    let rendered = effects_table(std::slice::from_ref(&natural), EffectMode::Natural).map_err(|e| e.to_string())?;
    let row = "GPT-4 | 93.5 | 40.0 | 22.2";
    check(rendered.text.lines().any(|l| l == row), || format!("row missing from\n{}", rendered.text))?;

    let mut controlled = natural.clone();
    controlled.mode = EffectMode::Controlled;
    let ctable = effects_table(&[controlled], EffectMode::Controlled).map_err(|e| e.to_string())?;
    check(ctable.text.lines().any(|l| l == "GPT-4 | 40.0 | 22.2 | <0.001"), || {
        format!("controlled row missing from\n{}", ctable.text)
    })?;
    let buckets = [(0.0004, "<0.001"), (0.003, "<0.005"), (0.009, "<0.01"), (0.02, "<0.05"), (0.2, "0.200")];
    for (p, want) in buckets {
        check(pvalue_bucket(p) == want, || format!("bucket({p}) = {}", pvalue_bucket(p)))?;
    }
    Ok(format!("`{row}`, p_ie {:.2e} -> {}", natural.p_ie, pvalue_bucket(natural.p_ie)))
}

// ---------------------------------------------------------------------------
// 9. LAS

fn las_fixture() -> Outcome {
    let recs = |matches: &[bool]| -> Vec<SimulatorRecord> {
        matches
            .iter()
            .enumerate()
            .map(|(i, &m)| SimulatorRecord { problem_id: format!("l{i}"), matches_prediction: m })
            .collect()
    };
    let same = [true, false, true, true, false, true, false, true, true, false];
    let identical = las(&recs(&same), &recs(&same)).map_err(|e| e.to_string())?;
    check(identical.las == 0.0, || format!("identical passes gave {}", identical.las))?;
    let leak = las(&recs(&[true; 10]), &recs(&[true, false, true, false, true, false, true, false, true, false]))
        .map_err(|e| e.to_string())?;
    check(leak.las == 0.5 && leak.matches_with == 10 && leak.matches_without == 5, || format!("{leak:?}"))?;
    Ok(format!("identical -> {}, full leak 10/10 vs 5/10 -> {}", identical.las, leak.las))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("effect-estimator oracle", effect_oracle),
        ("permutation-test exactness", permutation_exactness),
        ("closed forms", closed_forms),
        ("two-route DPO", two_route_dpo),
        ("operand-swap soundness", operand_swap),
        ("end-to-end determinism", end_to_end),
        ("flip-rate fixture", flip_rate_fixture),
        ("golden report row", golden_row),
        ("LAS oracle", las_fixture),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
