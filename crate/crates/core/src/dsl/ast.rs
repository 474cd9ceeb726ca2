use super::features::FeatureVersion;

/// Maximum nesting of boolean connectives in a predicate; a bare atom has depth 0.
pub const MAX_PRED_DEPTH: usize = 2;

/// `⟨β, φ⟩` with the constant coefficient stored last.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine(pub Vec<f64>);

impl Affine {
    pub fn zeros(dim: usize) -> Self {
        Affine(vec![0.0; dim])
    }

    pub fn eval(&self, phi: &[f64]) -> f64 {
        self.0.iter().zip(phi).map(|(b, x)| b * x).sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|b| b.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pred {
    /// `⟨β, φ⟩ ≥ 0`.
    Atom(Affine),
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

impl Pred {
    /// The trivially true predicate (all-zero atom).
    pub fn always(dim: usize) -> Self {
        Pred::Atom(Affine::zeros(dim))
    }

    pub fn is_always(&self) -> bool {
        matches!(self, Pred::Atom(a) if a.is_zero())
    }

    pub fn depth(&self) -> usize {
        match self {
            Pred::Atom(_) => 0,
            Pred::And(a, b) | Pred::Or(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn eval(&self, phi: &[f64]) -> bool {
        match self {
            Pred::Atom(a) => a.eval(phi) >= 0.0,
            Pred::And(a, b) => a.eval(phi) && b.eval(phi),
            Pred::Or(a, b) => a.eval(phi) || b.eval(phi),
        }
    }

    pub fn atoms(&self) -> Vec<&Affine> {
        match self {
            Pred::Atom(a) => vec![a],
            Pred::And(a, b) | Pred::Or(a, b) => {
                let mut v = a.atoms();
                v.extend(b.atoms());
                v
            }
        }
    }

    pub fn atoms_mut(&mut self) -> Vec<&mut Affine> {
        match self {
            Pred::Atom(a) => vec![a],
            Pred::And(a, b) | Pred::Or(a, b) => {
                let mut v = a.atoms_mut();
                v.extend(b.atoms_mut());
                v
            }
        }
    }

    /// Number of binary connectives.
    pub fn connectives(&self) -> usize {
        match self {
            Pred::Atom(_) => 0,
            Pred::And(a, b) | Pred::Or(a, b) => 1 + a.connectives() + b.connectives(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    /// `argmax(map(score, filter(pred, l)))`.
    Det { score: Affine, pred: Pred },
    /// `random(filter(pred, l))`.
    Rand { pred: Pred },
}

impl Rule {
    pub fn pred(&self) -> &Pred {
        match self {
            Rule::Det { pred, .. } | Rule::Rand { pred } => pred,
        }
    }

    pub fn pred_mut(&mut self) -> &mut Pred {
        match self {
            Rule::Det { pred, .. } | Rule::Rand { pred } => pred,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Rule::Rand { .. })
    }
}

/// `K` rules over one feature map; each rule selects at most one sender.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub features: FeatureVersion,
    pub rules: Vec<Rule>,
}

impl Program {
    /// Checks arity, weight dimensions, finiteness and the depth bound.
    pub fn validate(&self) -> Result<(), String> {
        if self.rules.is_empty() {
            return Err("a program needs at least one rule".into());
        }
        let dim = self.features.dim();
        for (k, r) in self.rules.iter().enumerate() {
            let mut vecs = r.pred().atoms();
            if let Rule::Det { score, .. } = r {
                vecs.push(score);
            }
            for a in vecs {
                if a.dim() != dim {
                    return Err(format!("rule {k}: weight vector of length {} for {dim} features", a.dim()));
                }
                if !a.is_finite() {
                    return Err(format!("rule {k}: non-finite weight"));
                }
            }
            if r.pred().depth() > MAX_PRED_DEPTH {
                return Err(format!("rule {k}: predicate depth {} exceeds {MAX_PRED_DEPTH}", r.pred().depth()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.rules.len()
    }

    pub fn has_random(&self) -> bool {
        self.rules.iter().any(Rule::is_random)
    }

    /// Program whose every rule keeps all candidates and picks by a fixed score.
    pub fn select_all_like(features: FeatureVersion, k: usize) -> Self {
        let dim = features.dim();
        Program {
            features,
            rules: (0..k)
                .map(|_| Rule::Det {
                    score: Affine::zeros(dim),
                    pred: Pred::always(dim),
                })
                .collect(),
        }
    }
}
