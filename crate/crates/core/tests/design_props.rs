use mvemu::design::{generate, min_distance, slices, Criterion, DesignSpec};
use mvemu::rng::Seed;
use mvemu::schema::{Variable, VariableSchema};
use proptest::prelude::*;

fn schema(p1: usize, levels: &[usize]) -> VariableSchema {
    let mut v: Vec<Variable> = (0..p1).map(|i| Variable::continuous(&format!("x{i}"), -1.0, 3.0)).collect();
    for (j, &l) in levels.iter().enumerate() {
        let names: Vec<String> = (0..l).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        v.push(Variable::categorical(&format!("c{j}"), &refs));
    }
    VariableSchema::new(v).unwrap()
}

fn strata(values: impl Iterator<Item = f64>, bins: usize) -> Vec<usize> {
    let mut s: Vec<usize> = values.map(|v| (v * bins as f64).floor() as usize).collect();
    s.sort();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn sliced_latin_hypercube(p1 in 1usize..4, levels in prop::collection::vec(2usize..4, 0..3), m in 1usize..6, seed in 0u64..1000, maximin in any::<bool>()) {
        let v = schema(p1, &levels);
        let s = slices(&v).len();
        let n = s * m;
        let spec = DesignSpec {
            n,
            criterion: if maximin { Criterion::MaximinLhs } else { Criterion::RandomLhs },
            budget: Some(50),
            seed: Seed(seed),
        };
        let d = generate(&v, &spec).unwrap();
        prop_assert_eq!(d.len(), n);
        for x in &d {
            prop_assert!(v.check_point(x).is_ok());
        }
        for c in 0..p1 {
            prop_assert_eq!(strata(d.iter().map(|x| x[c]), n), (0..n).collect::<Vec<_>>());
            for combo in slices(&v) {
                let members: Vec<&Vec<f64>> = d.iter().filter(|x| x[p1..] == combo[..]).collect();
                prop_assert_eq!(members.len(), m);
                prop_assert_eq!(strata(members.iter().map(|x| x[c]), m), (0..m).collect::<Vec<_>>());
            }
        }
        prop_assert_eq!(generate(&v, &spec).unwrap(), d);
    }
}

#[test]
fn maximin_never_worse_than_random() {
    let v = schema(3, &[2]);
    for seed in 0..100 {
        let spec = |criterion| DesignSpec {
            n: 20,
            criterion,
            budget: None,
            seed: Seed(seed),
        };
        let random = min_distance(&generate(&v, &spec(Criterion::RandomLhs)).unwrap(), 3).0;
        let maximin = min_distance(&generate(&v, &spec(Criterion::MaximinLhs)).unwrap(), 3).0;
        assert!(maximin >= random, "seed {seed}");
    }
}

#[test]
fn paper_scale_design() {
    let mut vars: Vec<Variable> = (1..=11).map(|i| Variable::continuous(&format!("x{i}"), 0.0, 1.0)).collect();
    vars.push(Variable::categorical("c1", &["a", "b"]));
    vars.push(Variable::categorical("c2", &["a", "b"]));
    let v = VariableSchema::new(vars).unwrap();
    let spec = DesignSpec {
        n: 120,
        criterion: Criterion::MaximinLhs,
        budget: None,
        seed: Seed(1),
    };
    let d = generate(&v, &spec).unwrap();
    for combo in slices(&v) {
        assert_eq!(d.iter().filter(|x| x[11..] == combo[..]).count(), 30);
    }
}
