use rem_bench::{hub_multiplex, random_ic_lt};
use rem_core::graph::write_multiplex;

#[test]
fn fixtures_are_sized_and_seeded() {
    let g = random_ic_lt(500, 3, 1);
    assert_eq!(g.num_nodes(), 500);
    assert_eq!(g.num_layers(), 2);
    assert_eq!(g.total_edges(), 3000);
    assert_eq!(write_multiplex(&g), write_multiplex(&random_ic_lt(500, 3, 1)));

    let h = hub_multiplex(200, 1);
    assert_eq!(h.num_nodes(), 200);
    assert_eq!(write_multiplex(&h), write_multiplex(&hub_multiplex(200, 1)));
    assert_ne!(write_multiplex(&h), write_multiplex(&hub_multiplex(200, 2)));
}
