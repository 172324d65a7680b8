use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::kg::PlantedKg;
use super::SynthError;
use crate::corpus::{evaluate_expression, slot_marker, Expr, Operator, Problem, Symbols};

const NAMES: [&str; 10] = ["amy", "bob", "cara", "dan", "eve", "finn", "gus", "hana", "ivan", "jill"];
const CONNECTIVES: [&str; 3] = ["then", "later", "next"];
const QUESTIONS: [&str; 3] = [
    "how many {cat} does {name} have ?",
    "how many {cat} are there now ?",
    "what is the number of {cat} ?",
];
const MAX_ATTEMPTS: usize = 10_000;

/// Label of the number attached to the asked-about item.
pub const ASKED: char = 'a';

#[derive(Clone, Debug, PartialEq)]
enum Piece {
    Lit(String),
    Name,
    Category,
    /// Asked item plus distractors, each preceded by its number, in random order.
    Items,
    Connective,
    Question,
    Trigger(usize),
    Number(char),
}

#[derive(Clone, Debug, PartialEq)]
enum Pattern {
    Op(usize, Box<Pattern>, Box<Pattern>),
    Num(char),
}

/// A surface pattern plus the expression it denotes.
///
/// Pattern placeholders: `{name}`, `{cat}` (the asked category word),
/// `{items}`, `{then}`, `{question}`, `{tK}` (a trigger word of operator K)
/// and single-letter numbers such as `{x}`. The expression is prefix text over
/// `opK` and number labels, where `a` is the asked item's number.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub name: String,
    pub ops: Vec<Operator>,
    pieces: Vec<Piece>,
    expr: Pattern,
}

fn parse_pattern(tokens: &[&str], pos: &mut usize, num_ops: usize) -> Result<Pattern, String> {
    let tok = *tokens.get(*pos).ok_or("expression ends early")?;
    *pos += 1;
    if let Some(k) = tok.strip_prefix("op") {
        let k: usize = k.parse().map_err(|_| format!("bad operator reference {tok:?}"))?;
        if k >= num_ops {
            return Err(format!("{tok} refers past {num_ops} operator(s)"));
        }
        let l = parse_pattern(tokens, pos, num_ops)?;
        let r = parse_pattern(tokens, pos, num_ops)?;
        return Ok(Pattern::Op(k, Box::new(l), Box::new(r)));
    }
    let mut chars = tok.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_lowercase() => Ok(Pattern::Num(c)),
        _ => Err(format!("bad expression token {tok:?}")),
    }
}

impl Pattern {
    fn labels(&self, out: &mut Vec<char>) {
        match self {
            Pattern::Op(_, l, r) => {
                l.labels(out);
                r.labels(out);
            }
            Pattern::Num(c) => out.push(*c),
        }
    }

    fn ops(&self, out: &mut Vec<usize>) {
        if let Pattern::Op(k, l, r) = self {
            out.push(*k);
            l.ops(out);
            r.ops(out);
        }
    }

    /// Exact integer value if every intermediate result is a positive integer.
    fn eval(&self, ops: &[Operator], value: &dyn Fn(char) -> i64) -> Option<i64> {
        match self {
            Pattern::Num(c) => Some(value(*c)),
            Pattern::Op(k, l, r) => {
                let a = l.eval(ops, value)?;
                let b = r.eval(ops, value)?;
                let v = match ops[*k] {
                    Operator::Add => a.checked_add(b)?,
                    Operator::Sub => a - b,
                    Operator::Mul => a.checked_mul(b)?,
                    Operator::Div => {
                        if b == 0 || a % b != 0 {
                            return None;
                        }
                        a / b
                    }
                };
                (v >= 1).then_some(v)
            }
        }
    }

    fn to_expr(&self, ops: &[Operator], slot: &dyn Fn(char) -> usize) -> Expr {
        match self {
            Pattern::Num(c) => Expr::Slot(slot(*c)),
            Pattern::Op(k, l, r) => Expr::Binary(ops[*k], Box::new(l.to_expr(ops, slot)), Box::new(r.to_expr(ops, slot))),
        }
    }
}

impl Template {
    pub fn parse(name: &str, ops: &[Operator], pattern: &str, expression: &str) -> Result<Self, SynthError> {
        let err = |m: String| SynthError::BadTemplate(name.to_string(), m);
        let mut pieces = Vec::new();
        for tok in pattern.split_whitespace() {
            let piece = match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                None => Piece::Lit(tok.to_string()),
                Some("name") => Piece::Name,
                Some("cat") => Piece::Category,
                Some("items") => Piece::Items,
                Some("then") => Piece::Connective,
                Some("question") => Piece::Question,
                Some(t) if t.starts_with('t') && t.len() > 1 => {
                    let k: usize = t[1..].parse().map_err(|_| err(format!("bad trigger {tok}")))?;
                    if k >= ops.len() {
                        return Err(err(format!("{tok} refers past {} operator(s)", ops.len())));
                    }
                    Piece::Trigger(k)
                }
                Some(t) if t.len() == 1 && t.as_bytes()[0].is_ascii_lowercase() && t != "a" => {
                    Piece::Number(t.chars().next().unwrap())
                }
                Some(t) => return Err(err(format!("unknown placeholder {{{t}}}"))),
            };
            pieces.push(piece);
        }
        let toks: Vec<&str> = expression.split_whitespace().collect();
        let mut pos = 0;
        let expr = parse_pattern(&toks, &mut pos, ops.len()).map_err(err)?;
        if pos != toks.len() {
            return Err(err("trailing expression tokens".into()));
        }
        let t = Self {
            name: name.to_string(),
            ops: ops.to_vec(),
            pieces,
            expr,
        };
        t.check().map_err(err)?;
        Ok(t)
    }

    fn check(&self) -> Result<(), String> {
        let mut used = Vec::new();
        self.expr.ops(&mut used);
        for k in 0..self.ops.len() {
            if !used.contains(&k) {
                return Err(format!("operator op{k} unused in the expression"));
            }
            if !self.pieces.contains(&Piece::Trigger(k)) {
                return Err(format!("operator op{k} has no trigger word in the pattern"));
            }
        }
        let mut labels = Vec::new();
        self.expr.labels(&mut labels);
        for c in labels {
            let present = if c == ASKED {
                self.pieces.contains(&Piece::Items)
            } else {
                self.pieces.contains(&Piece::Number(c))
            };
            if !present {
                return Err(format!("number {c:?} does not appear in the pattern"));
            }
        }
        if !self.pieces.contains(&Piece::Items) {
            return Err("pattern lacks {items}".into());
        }
        Ok(())
    }

    pub fn num_operators(&self) -> usize {
        self.ops.len()
    }
}

/// One template per operator and per ordered pair of distinct operators.
pub fn default_templates(operators: &[Operator]) -> Vec<Template> {
    let intro = "{name} has {items} .";
    let mut out = Vec::new();
    for &op in operators {
        let pattern = format!("{intro} {{then}} {{name}} {{t0}} {{x}} {{cat}} . {{question}}");
        out.push(Template::parse(&format!("one-{}", op.token()), &[op], &pattern, "op0 a x").unwrap());
    }
    for &first in operators {
        for &second in operators {
            if first == second {
                continue;
            }
            let pattern = format!(
                "{intro} {{then}} {{name}} {{t0}} {{x}} {{cat}} . {{then}} {{name}} {{t1}} {{y}} {{cat}} . {{question}}"
            );
            out.push(
                Template::parse(
                    &format!("two-{}{}", first.token(), second.token()),
                    &[first, second],
                    &pattern,
                    "op1 op0 a x y",
                )
                .unwrap(),
            );
        }
    }
    out
}

fn fill_question<R: Rng + ?Sized>(rng: &mut R, cat: &str, name: &str, out: &mut Vec<String>) {
    let q = QUESTIONS.choose(rng).unwrap();
    for tok in q.split_whitespace() {
        out.push(match tok {
            "{cat}" => cat.to_string(),
            "{name}" => name.to_string(),
            t => t.to_string(),
        });
    }
}

/// Draws a template and fills it from the planted graph: a category is asked
/// about, one of its members carries the asked number, and `distractors`
/// members of a partner category carry unrelated numbers.
pub fn instantiate_problem<R: Rng + ?Sized>(
    templates: &[Template],
    kg: &PlantedKg,
    distractors: usize,
    number_range: (i64, i64),
    id: &str,
    rng: &mut R,
) -> Result<Problem, SynthError> {
    let template = templates.choose(rng).ok_or(SynthError::NoTemplates)?;
    let op_index = |op: Operator| {
        kg.operators
            .iter()
            .position(|&o| o == op)
            .ok_or_else(|| SynthError::InconsistentKg(format!("template uses {} which has no triggers", op.token())))
    };
    let trigger_words: Vec<usize> = template
        .ops
        .iter()
        .map(|&op| {
            let t = kg.triggers(op_index(op)?);
            t.choose(rng)
                .copied()
                .ok_or_else(|| SynthError::InconsistentKg(format!("no trigger for {}", op.token())))
        })
        .collect::<Result<_, _>>()?;
    if kg.groups.len() < 2 {
        return Err(SynthError::InconsistentKg("need at least two categories".into()));
    }
    let g = rng.random_range(0..kg.groups.len());
    let group = &kg.groups[g];
    let partner = &kg.groups[partner_of(g, kg.groups.len())];
    let asked = *group.members.choose(rng).unwrap();
    let others: Vec<usize> = partner.members.choose_multiple(rng, distractors).copied().collect();
    let name = *NAMES.choose(rng).unwrap();
    let cat = kg.words[group.category].as_str();

    let mut labels = Vec::new();
    template.expr.labels(&mut labels);
    let (lo, hi) = number_range;
    let mut values = std::collections::HashMap::new();
    let mut ok = false;
    for _ in 0..MAX_ATTEMPTS {
        values.clear();
        for &c in &labels {
            values.insert(c, rng.random_range(lo..=hi));
        }
        if template.expr.eval(&template.ops, &|c| values[&c]).is_some() {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(SynthError::Infeasible(format!(
            "template {} found no valid numbers in [{lo}, {hi}]",
            template.name
        )));
    }

    // Item order: asked item among the distractors at a random position.
    let mut items: Vec<(Option<char>, usize)> = others.iter().map(|&w| (None, w)).collect();
    items.push((Some(ASKED), asked));
    items.shuffle(rng);

    let mut tokens = Vec::new();
    let mut number_values = Vec::new();
    let mut slot_of = std::collections::HashMap::new();
    let mut push_number = |label: Option<char>, value: i64, tokens: &mut Vec<String>| {
        number_values.push(value as f64);
        tokens.push(slot_marker(number_values.len()));
        if let Some(c) = label {
            slot_of.insert(c, number_values.len());
        }
    };
    for piece in &template.pieces {
        match piece {
            Piece::Lit(s) => tokens.push(s.clone()),
            Piece::Name => tokens.push(name.to_string()),
            Piece::Category => tokens.push(cat.to_string()),
            Piece::Connective => tokens.push(CONNECTIVES.choose(rng).unwrap().to_string()),
            Piece::Question => fill_question(rng, cat, name, &mut tokens),
            Piece::Trigger(k) => tokens.push(kg.words[trigger_words[*k]].clone()),
            Piece::Number(c) => push_number(Some(*c), values[c], &mut tokens),
            Piece::Items => {
                for (n, &(label, w)) in items.iter().enumerate() {
                    if n > 0 {
                        tokens.push("and".to_string());
                    }
                    let v = match label {
                        Some(c) => values[&c],
                        None => rng.random_range(lo..=hi),
                    };
                    push_number(label, v, &mut tokens);
                    tokens.push(kg.words[w].clone());
                }
            }
        }
    }
    let expr = template.expr.to_expr(&template.ops, &|c| slot_of[&c]);
    let symbols = Symbols::default();
    let answer = evaluate_expression(&expr, &number_values, &symbols)
        .map_err(|e| SynthError::Infeasible(format!("template {}: {e}", template.name)))?;
    Ok(Problem {
        id: id.to_string(),
        tokens,
        number_values,
        prefix: expr.to_prefix(&symbols),
        answer,
    })
}

/// Categories are paired so an asked category always meets distractors from
/// the same partner, which keeps raw co-occurrence from separating members
/// of the two.
pub fn partner_of(g: usize, num_groups: usize) -> usize {
    let p = g ^ 1;
    if p < num_groups {
        p
    } else {
        (g + 1) % num_groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{plant_knowledge_graph, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vec<Template>, PlantedKg) {
        let kg = plant_knowledge_graph(&SynthConfig::default(), 11).unwrap();
        (default_templates(&kg.operators), kg)
    }

    #[test]
    fn sixteen_default_templates() {
        let (t, _) = setup();
        assert_eq!(t.len(), 16);
        assert_eq!(t.iter().filter(|t| t.num_operators() == 2).count(), 12);
    }

    #[test]
    fn product_template_contains_trigger_and_multiplies() {
        let (_, kg) = setup();
        let t = Template::parse(
            "mul",
            &[Operator::Mul],
            "{name} has {items} , {name} has {x} {t0} as many . how many {cat} ?",
            "op0 a x",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = instantiate_problem(std::slice::from_ref(&t), &kg, 1, (2, 20), "p", &mut rng).unwrap();
            let triggers: Vec<&str> = kg.triggers(2).iter().map(|&i| kg.words[i].as_str()).collect();
            assert!(p.tokens.iter().any(|w| triggers.contains(&w.as_str())));
            assert_eq!(p.prefix[0], "*");
            let a = crate::corpus::slot_index(&p.prefix[1]).unwrap();
            let x = crate::corpus::slot_index(&p.prefix[2]).unwrap();
            assert_eq!(p.answer, p.number_values[a - 1] * p.number_values[x - 1]);
            p.validate(&Symbols::default()).unwrap();
        }
    }

    #[test]
    fn same_rng_state_same_problem() {
        let (t, kg) = setup();
        let a = instantiate_problem(&t, &kg, 1, (2, 20), "p", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = instantiate_problem(&t, &kg, 1, (2, 20), "p", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_operator_problems_have_prefix_of_five() {
        let (t, kg) = setup();
        let two: Vec<Template> = t.into_iter().filter(|t| t.num_operators() == 2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = instantiate_problem(&two, &kg, 1, (2, 20), "p", &mut rng).unwrap();
            assert_eq!(p.prefix.len(), 5);
            assert_eq!(p.num_slots(), 4);
        }
    }

    #[test]
    fn numbers_are_small_integers_and_results_positive() {
        let (t, kg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let p = instantiate_problem(&t, &kg, 2, (2, 20), "p", &mut rng).unwrap();
            assert!(p.number_values.iter().all(|&v| v.fract() == 0.0 && (2.0..=20.0).contains(&v)));
            assert!(p.answer >= 1.0 && p.answer.fract() == 0.0);
        }
    }

    #[test]
    fn asked_number_sits_next_to_a_member_of_the_asked_category() {
        let (t, kg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = instantiate_problem(&t, &kg, 1, (2, 20), "p", &mut rng).unwrap();
            let last = p.tokens.len() - 1;
            let cat = (0..last)
                .rev()
                .map(|i| p.tokens[i].as_str())
                .find(|w| kg.groups.iter().any(|g| kg.words[g.category] == *w))
                .unwrap();
            let cat = kg.word_index(cat).unwrap();
            // The innermost leftmost slot is the asked item's number.
            let leaf = p.prefix.iter().find(|s| s.starts_with("NUM")).unwrap();
            let pos = p.tokens.iter().position(|t| t == leaf).unwrap();
            let item = kg.word_index(&p.tokens[pos + 1]).unwrap();
            assert!(kg.has_ww(cat, item));
        }
    }

    #[test]
    fn bad_templates_are_rejected() {
        assert!(Template::parse("t", &[Operator::Add], "{name} has {items} {x} .", "op0 a x").is_err());
        assert!(Template::parse("t", &[Operator::Add], "{items} {t0} .", "op0 a x").is_err());
        assert!(Template::parse("t", &[Operator::Add], "{items} {t0} {x}", "op1 a x").is_err());
        assert!(Template::parse("t", &[Operator::Add], "{items} {t0} {x} {bogus}", "op0 a x").is_err());
    }

    #[test]
    fn partners_pair_up() {
        assert_eq!(partner_of(0, 8), 1);
        assert_eq!(partner_of(7, 8), 6);
        assert_eq!(partner_of(2, 3), 0);
    }
}
