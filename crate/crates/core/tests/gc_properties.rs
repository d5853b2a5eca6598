mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retroheap::MinorVariant;

#[test]
fn dropped_objects_are_free_two_cycles_later() {
    for minor in VARIANTS {
        let out = floating_garbage(minor, 11, 6000);
        assert!(out.failures.is_empty(), "{:#?}", &out.failures[..out.failures.len().min(10)]);
        assert!(out.dropped > 100, "{out:?}");
        assert!(out.checked > 0, "{out:?}");
        assert!(out.cycles >= 4, "{out:?}");
    }
}

fn plan_for(seed: u64) -> HeapPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let p = HeapPlan::random(&mut rng);
        if p.chain_depth() <= 4 {
            return p;
        }
    }
}

fn check_plan(plan: &HeapPlan, minor: MinorVariant) -> Result<(), String> {
    let want = plan.oracle();
    let got = run_plan(plan, minor);
    for (k, (&w, &(data, keys))) in want.iter().zip(&got).enumerate() {
        let e = &plan.ephemerons[k];
        if data != w {
            return Err(format!("ephemeron {k} data present={data}, oracle says {w}; plan {plan:?}"));
        }
        let keys_live = e.data.is_none() || w;
        if e.data.is_some() && keys != keys_live {
            return Err(format!("ephemeron {k} keys present={keys}, expected {keys_live}; plan {plan:?}"));
        }
    }
    Ok(())
}

#[test]
fn ephemeron_chain_of_four_across_domains() {
    // key 0 is rooted; e_i maps object i to object i + 1
    let plan = HeapPlan {
        domains: 3,
        edges: vec![vec![]; 6],
        roots: vec![0],
        ephemerons: (0..4).map(|i| EphePlan { owner: i % 3, keys: vec![i], data: Some(i + 1) }).collect(),
    };
    assert_eq!(plan.chain_depth(), 4);
    assert_eq!(plan.oracle(), [true; 4]);
    for minor in VARIANTS {
        check_plan(&plan, minor).unwrap();
    }
    let cut = HeapPlan { roots: vec![], ..plan };
    assert_eq!(cut.oracle(), [false; 4]);
    for minor in VARIANTS {
        check_plan(&cut, minor).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn ephemerons_match_the_oracle(seed in any::<u64>(), conc in any::<bool>()) {
        let minor = if conc { MinorVariant::Conc } else { MinorVariant::Stw };
        let plan = plan_for(seed);
        prop_assert!(check_plan(&plan, minor).is_ok(), "{}", check_plan(&plan, minor).unwrap_err());
    }
}
