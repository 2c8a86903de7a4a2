use super::*;
use crate::exec::{execute, ExecConfig};
use crate::ir::{parse_program, parse_testcase, Program};

const FIG2: &str = include_str!("../../../../corpus/fig2_tcindex.mk");
const FIG2_POC: &str = include_str!("../../../../corpus/fig2_tcindex.poc");
const FIG6: &str = include_str!("../../../../corpus/fig6_tcp.mk");
const FIG6_POC: &str = include_str!("../../../../corpus/fig6_tcp.poc");

fn prog(src: &str) -> Program {
    parse_program(src).unwrap_or_else(|e| panic!("{:?}", e.diagnostics()))
}

fn first_read(p: &Program, poc: &str) -> Impact {
    let tc = parse_testcase(poc, p).unwrap();
    let r = execute(p, &tc, &ExecConfig::multi_shot());
    r.impacts.into_iter().find(|i| i.kind.is_vuln_read()).expect("a vulnerable read")
}

fn estimate(src: &str, poc: &str) -> (Program, Estimate) {
    let p = prog(src);
    let a = locate_vuln_point(&p, &first_read(&p, poc)).unwrap();
    let e = estimate_hidden_impacts(&p, &a, &TaintLimits::default());
    (p, e)
}

fn has(e: &Estimate, kind: PotentialKind, loc: &Location) -> bool {
    e.impacts.iter().any(|i| i.kind == kind && &i.sink == loc)
}

#[test]
fn fig2_anchor_is_the_actions_load() {
    let p = prog(FIG2);
    let a = locate_vuln_point(&p, &first_read(&p, FIG2_POC)).unwrap();
    assert_eq!(a.instruction, Location::new("tcf_exts_destroy", 0, 0));
    assert_eq!(a.object.size, 16);
    assert_eq!(a.object.offset, 16);
}

#[test]
fn anchor_must_be_a_load() {
    let p = prog(FIG2);
    let mut r = first_read(&p, FIG2_POC);
    r.location = Location::new("tcf_action_destroy", 3, 0);
    assert_eq!(locate_vuln_point(&p, &r), Err(TaintError::AnchorNotFound(r.location.clone())));
}

#[test]
fn fig2_reports_aaw_and_fpd_sites() {
    let (p, e) = estimate(FIG2, FIG2_POC);
    let at = |f: &str, label: &str, i: usize| Location::new(f, p.function(f).unwrap().block_index(label).unwrap(), i);
    let store = at("tcf_action_destroy", "body", 0);
    let icall = at("tcf_action_cleanup", "call_cleanup", 0);
    assert!(has(&e, PotentialKind::WriteAddr, &store), "{:#?}", e.impacts);
    assert!(has(&e, PotentialKind::Fpd, &icall));
    assert!(!e.incomplete);
    let fpd = e.impacts.iter().find(|i| i.kind == PotentialKind::Fpd).unwrap();
    // Hand count: 1 (tcf_exts_destroy) + 3 (tcf_action_destroy) + 14
    // (__tcf_idr_release) + 22 (__tcf_action_put) + 1 (tcf_action_cleanup).
    assert_eq!(fpd.distance, 41);
    assert_eq!(e.guidance.farthest.as_ref(), Some(&icall));
    let t = e.guidance.trace(fpd.trace_id).unwrap();
    assert_eq!(t.scope_depth, 0);
    // The lock must be taken: val == 1 and the locked branch.
    let locked = at("__tcf_action_put", "locked_check", 0);
    let req = t.branches.iter().find(|b| b.branch == locked).expect("locked branch on trace");
    assert_eq!(req.direction, Direction::Taken);
    assert_eq!(
        req.context,
        vec![
            at("__tcf_idr_release", "put", 0),
            at("tcf_action_destroy", "body", 1),
            at("tcf_exts_destroy", "destroy", 0),
        ]
    );
    let aaw = e.impacts.iter().find(|i| i.sink == store).unwrap();
    assert_eq!(aaw.distance, 4);
}

#[test]
fn fig6_writes_to_object_behind_the_early_return() {
    let (p, e) = estimate(FIG6, FIG6_POC);
    assert_eq!(e.anchor.instruction, Location::new("tcp_highest_sack_seq", 0, 0));
    let f = p.function("tcp_check_sack_reordering").unwrap();
    let update = f.block_index("update").unwrap();
    let obj_writes: Vec<_> =
        e.impacts.iter().filter(|i| i.kind == PotentialKind::WriteToObject).map(|i| i.sink.clone()).collect();
    assert_eq!(obj_writes, [Location::new("tcp_check_sack_reordering", update, 2), Location::new("tcp_check_sack_reordering", update, 5)]);
    let t = e.guidance.trace(e.impacts.iter().find(|i| i.kind == PotentialKind::WriteToObject).unwrap().trace_id).unwrap();
    assert_eq!(t.scope_depth, -1);
    assert!(t.branches.iter().any(|b| b.branch == Location::new("tcp_check_sack_reordering", 0, 6) && b.direction.is_taken()));
}

const DEAD: &str = "program dead
global g
fn setup() {
bb0:
  r0 = alloc 16
  gstore g, r0
  free r0
  ret 0
}
fn peek() {
bb0:
  r0 = gload g
  r1 = load r0, 8
  ret 0
}
entry setup
entry peek
";

#[test]
fn unused_load_has_no_impacts() {
    let (_, e) = estimate(DEAD, "call setup()\ncall peek()\n");
    assert!(e.impacts.is_empty());
    assert!(e.guidance.traces.is_empty());
    assert_eq!(e.guidance.farthest, None);
}

const FIELDS: &str = "program fields
global g
global live
fn setup() {
bb0:
  r0 = alloc 16
  gstore g, r0
  r1 = alloc 32
  gstore live, r1
  free r0
  ret 0
}
fn use() {
bb0:
  r0 = gload g
  r1 = load r0, 8
  r2 = gload live
  store r2+8, r1, 8
  r3 = load r2+16, 8
  store r3, 0, 8
  r4 = load r2+8, 8
  store r4, 0, 8
  ret 0
}
entry setup
entry use
";

#[test]
fn field_sensitive_memory() {
    let (_, e) = estimate(FIELDS, "call setup()\ncall use()\n");
    // The tainted value stored at +8 reaches the load at +8 only.
    assert!(has(&e, PotentialKind::WriteValue, &Location::new("use", 0, 3)));
    assert!(!e.sinks().contains(&Location::new("use", 0, 5)));
    assert!(has(&e, PotentialKind::WriteAddr, &Location::new("use", 0, 7)));
}

#[test]
fn distance_basics() {
    let p = prog("program d\nfn f() {\nb0:\n  br b1\nb1:\n  br b2\nb2:\n  ret 0\n}\nentry f\n");
    let l = |b| Location::new("f", b, 0);
    assert_eq!(distance(&p, &l(0), &l(0)), Some(0));
    assert_eq!(distance(&p, &l(0), &l(2)), Some(2));
    assert_eq!(distance(&p, &l(2), &l(0)), None);
}

#[test]
fn deeper_contexts_keep_corpus_sinks() {
    for (src, poc) in [(FIG2, FIG2_POC), (FIG6, FIG6_POC)] {
        let p = prog(src);
        let a = locate_vuln_point(&p, &first_read(&p, poc)).unwrap();
        let mut prev = None;
        for depth in 1..=5 {
            let e = estimate_hidden_impacts(&p, &a, &TaintLimits { call_string_depth: depth, ..TaintLimits::default() });
            let s = e.sinks();
            if let Some(prev) = &prev {
                assert!(s.is_superset(prev), "depth {depth} lost sinks");
            }
            prev = Some(s);
        }
    }
}
