use super::*;

const SMALL: &str = "program p\nfn main() {\nbb0:\n  ret 0\n}\nentry main\n";

#[test]
fn minimal_program() {
    let p = parse_program(SMALL).unwrap();
    assert_eq!(p.functions.len(), 1);
    assert!(p.globals.is_empty());
    assert_eq!(p.entry_names().collect::<Vec<_>>(), ["main"]);
}

#[test]
fn unresolved_label_is_named() {
    let src = "program p\nfn main(r0) {\nbb0:\n  r1 = cmp eq r0, 0\n  condbr r1, bbX, bb1\nbb1:\n  ret 0\n}\n";
    let err = parse_program(src).unwrap_err();
    let d = err.diagnostics();
    assert_eq!(d.len(), 1);
    assert!(d[0].message.contains("bbX"), "{}", d[0].message);
    assert_eq!(d[0].line, 5);
}

#[test]
fn syntax_error_has_position() {
    let err = parse_program("program p\nfn main() {\nbb0:\n  r0 = frob 1\n  ret 0\n}\n").unwrap_err();
    match err {
        ParseError::Syntax { line, found, .. } => {
            assert_eq!(line, 4);
            assert!(found.contains("frob"));
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn use_before_def_rejected() {
    let src = "program p\nfn f(r0) {\nbb0:\n  condbr r0, bb1, bb2\nbb1:\n  r1 = const 1\n  br bb2\nbb2:\n  ret r1\n}\n";
    let err = parse_program(src).unwrap_err();
    assert!(err.diagnostics()[0].message.contains("r1"));
}

#[test]
fn arity_mismatch_rejected() {
    let src = "program p\nfn g(r0) {\nbb0:\n  ret r0\n}\nfn f() {\nbb0:\n  call g(1, 2)\n  ret 0\n}\n";
    assert!(parse_program(src).unwrap_err().diagnostics()[0].message.contains("arguments"));
}

#[test]
fn template_must_name_entries() {
    let src = format!("{SMALL}template t {{ main, nope }}\n");
    assert!(parse_program(&src).unwrap_err().diagnostics()[0].message.contains("nope"));
}

const MIXED: &str = "program   mixed ; comment\nglobal  g\n\n\
fn   helper( r0 ,r1 ) {\nentry_bb :\n   r2 =  add r0 ,  r1\n  store r0+8 , r2, 8\n\tr3 = load   r0-16,4\n  gstore g,-1\n   ret r3\n}\n\
fn main( r0 ) {\nbb0:\n r1 = alloc 0x20\n call helper( r1, r0 ) -> r2\n r3 = fnaddr helper\n icall r3(r1, 7)\n free r1\n assertfail WARN\n nop\n r4 = cmp lt r2, 70000\n condbr r4, bb1, bb0\nbb1:\n ret r2\n}\n\
entry   main\ntemplate t { main }\nmodule m { t }\n";

#[test]
fn canonical_form_golden() {
    let p = parse_program(MIXED).unwrap();
    let golden = "program mixed
global g

fn helper(r0, r1) {
entry_bb:
  r2 = add r0, r1
  store r0+8, r2, 8
  r3 = load r0-16, 4
  gstore g, -1
  ret r3
}

fn main(r0) {
bb0:
  r1 = alloc 32
  call helper(r1, r0) -> r2
  r3 = fnaddr helper
  icall r3(r1, 7)
  free r1
  assertfail WARN
  nop
  r4 = cmp lt r2, 0x11170
  condbr r4, bb1, bb0
bb1:
  ret r2
}

entry main
template t { main }
module m { t }
";
    assert_eq!(print_program(&p), golden);
}

#[test]
fn round_trip_and_determinism() {
    let p = parse_program(MIXED).unwrap();
    let once = print_program(&p);
    let q = parse_program(&once).unwrap();
    assert_eq!(p, q);
    assert_eq!(once, print_program(&q));
}

#[test]
fn function_table() {
    let p = parse_program(MIXED).unwrap();
    let main = p.func_id("main").unwrap();
    assert_eq!(p.function_address(main), 0x400100);
    assert_eq!(p.function_at(0x400100), Some(main));
    assert_eq!(p.function_at(0x400101), None);
    assert_eq!(p.function_at(0x400200), None);
}

#[test]
fn testcases() {
    let p = parse_program(
        "program f\nfn open(r0, r1) {\nb:\n ret 0\n}\nfn write(r0, r1) {\nb:\n ret 0\n}\nentry open\nentry write\n",
    )
    .unwrap();
    let tc = parse_testcase("call open(3,0)\ncall write(3,65536)\n", &p).unwrap();
    assert_eq!(tc.len(), 2);
    assert_eq!(tc.calls[1].args, vec![3, 65536]);
    assert_eq!(parse_testcase("", &p).unwrap().len(), 0);
    assert_eq!(parse_testcase("; nothing\n", &p).unwrap().len(), 0);
    let err = parse_testcase("poc {\n call close(3, 0)\n}\n", &p).unwrap_err();
    assert!(err.diagnostics()[0].message.contains("close"));
    let braced = parse_testcase(&print_testcase(&tc), &p).unwrap();
    assert_eq!(braced, tc);
    assert!(parse_testcase("call open(3)", &p).is_err());
}

#[test]
fn unknown_opcode_points_at_the_opcode() {
    let err = parse_program("program p\nfn f() {\nbb0:\n  r0 = frobnicate\n  bogus r1\n}\n").unwrap_err();
    assert_eq!(err.to_string(), "4:8: expected instruction, found `frobnicate`");
    let err = parse_program("program p\nfn f() {\nbb0:\n  bogus r1\n}\n").unwrap_err();
    assert_eq!(err.to_string(), "4:3: expected instruction, found `bogus`");
}
