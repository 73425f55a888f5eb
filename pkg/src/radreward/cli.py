"""Command-line entry point: ``radreward <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import corpus, evaluation, labeler, metrics, policy, reward

log = logging.getLogger("radreward")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_corpus_parse(args):
    raws = corpus.read_raw_reports(args.inp)
    headings = args.headings.split(",") if args.headings else corpus.DEFAULT_HEADINGS
    parsed = []
    for raw in raws:
        rep = corpus.parse_report(raw, headings)
        if rep is None:
            continue
        parsed.append(rep)
    log.info("kept %d of %d reports with a findings section", len(parsed), len(raws))
    vocab = corpus.build_vocabulary(parsed, args.min_count)
    parsed = [vocab.replace_unknown(r) for r in parsed]
    _write_text(args.out, corpus.dumps_parsed(parsed))
    if args.vocab_out:
        _write_text(args.vocab_out, json.dumps(vocab.to_json(), indent=2) + "\n")
    log.info("vocabulary: %d tokens (min_count=%d)", len(vocab), args.min_count)


def cmd_label(args):
    rules = labeler.load_ruleset(args.rules)
    reports = corpus.read_parsed_reports(args.inp)
    rows = [(r.id, labeler.label_report(r, rules)) for r in reports]
    _write_text(args.out, labeler.labels_to_csv(rows))


def cmd_score(args):
    gen = corpus.read_parsed_reports(args.generated)
    truth = corpus.read_parsed_reports(args.truth)
    rep = metrics.evaluate_nlg(gen, truth)
    _write_text(args.out, json.dumps(rep.to_json(), indent=2) + "\n")


def reward_report(gen, truth, labels_gen, labels_true, cfg, greedy=None):
    """Reward bundles for a generated corpus, EMA baselines carried in file order."""
    truth_by_id = {r.id: r for r in truth}
    greedy_by_id = {r.id: r for r in greedy or ()}
    idf = metrics.IdfContext.from_reports(truth)
    baselines = None
    rows = []
    for g in gen:
        if g.id not in truth_by_id or g.id not in labels_gen or g.id not in labels_true:
            raise KeyError(f"report {g.id!r} is missing from the truth corpus or a label file")
        terms, _ = reward.ccr_reward(labels_gen[g.id], labels_true[g.id], cfg)
        if baselines is None:
            baselines = reward.EmaBaselines.from_terms(terms)
        t = truth_by_id[g.id]
        nlg = reward.nlg_reward(g, t, idf, cfg.sigma)
        base = reward.nlg_reward(greedy_by_id[g.id], t, idf, cfg.sigma) if g.id in greedy_by_id else 0.0
        bundle = reward.assemble_bundle(terms, nlg, base, baselines, cfg.lam)
        rows.append({"id": g.id, **bundle.to_json()})
        baselines = reward.update_baselines(baselines, terms, cfg.gamma)
    n = len(rows) or 1
    aggregate = {
        key: sum(r[key] for r in rows) / n
        for key in ("ccr_total", "nlg_reward", "nlg_baseline_reward", "combined_advantage")
    }
    return {"config": cfg.to_json(), "reports": rows, "aggregate": aggregate}


def cmd_reward(args):
    cfg = reward.RewardConfig.load(args.config) if args.config else reward.RewardConfig()
    out = reward_report(
        corpus.read_parsed_reports(args.generated),
        corpus.read_parsed_reports(args.truth),
        labeler.read_labels_csv(args.labels_gen),
        labeler.read_labels_csv(args.labels_true),
        cfg,
        corpus.read_parsed_reports(args.greedy) if args.greedy else None,
    )
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_train_toy(args):
    conf = _load_json(args.config) if args.config else {}
    max_steps = int(conf.pop("max_steps", 4))
    cfg = reward.RewardConfig.from_json(conf)
    bank = policy.SentenceBank.load(args.bank)
    truth = corpus.read_parsed_reports(args.truth)
    if not truth:
        raise ValueError(f"{args.truth}: no truth report")
    rules = labeler.load_ruleset(args.rules)
    result = policy.train(
        policy.ToyPolicy.init(bank, max_steps), truth[0], cfg,
        steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed, rules=rules,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "policy.json"), json.dumps(result.policy.to_json(), indent=2) + "\n")
    _write_text(os.path.join(args.out, "reward_trace.csv"), result.trace_csv())
    greedy = corpus.ParsedReport(truth[0].id, result.greedy.sentences, truth[0].view)
    _write_text(os.path.join(args.out, "greedy_report.jsonl"), corpus.dumps_parsed([greedy]))
    log.info("final greedy report: %s", " . ".join(map(str, greedy.sentences)))


def cmd_evaluate(args):
    conf = _load_json(args.config) if args.config else {}
    if args.u_as:
        conf["u_as"] = args.u_as
    res = evaluation.run_evaluation(args.generated, args.truth, args.out_dir, args.rules, conf)
    log.info("CIDEr-D %.4f, macro accuracy %.4f", res.nlg.ciderD, res.clinical.accuracy_macro)


def cmd_nearest(args):
    queries = evaluation.read_embeddings(args.query)
    train = evaluation.read_embeddings(args.train)
    reports = {r.id: r for r in corpus.read_parsed_reports(args.train_reports)}
    out = evaluation.nearest_neighbor_reports(queries, train, reports, args.metric)
    _write_text(args.out, corpus.dumps_parsed(out))


def build_parser():
    p = argparse.ArgumentParser(prog="radreward", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="corpus preprocessing")
    csub = c.add_subparsers(dest="corpus_command", required=True)
    cp = csub.add_parser("parse", help="extract, split and tokenize findings sections")
    cp.add_argument("--in", dest="inp", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--min-count", type=int, default=5)
    cp.add_argument("--vocab-out")
    cp.add_argument("--headings", help="comma-separated heading lexicon")
    cp.set_defaults(func=cmd_corpus_parse)

    lb = sub.add_parser("label", help="rule-based finding labels")
    lb.add_argument("--in", dest="inp", required=True)
    lb.add_argument("--rules")
    lb.add_argument("--out", required=True)
    lb.set_defaults(func=cmd_label)

    sc = sub.add_parser("score", help="BLEU, ROUGE-L, CIDEr-D")
    sc.add_argument("--generated", required=True)
    sc.add_argument("--truth", required=True)
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_score)

    rw = sub.add_parser("reward", help="per-report reward bundles")
    rw.add_argument("--generated", required=True)
    rw.add_argument("--truth", required=True)
    rw.add_argument("--labels-gen", required=True)
    rw.add_argument("--labels-true", required=True)
    rw.add_argument("--config")
    rw.add_argument("--greedy", help="greedy-decoded reports (self-critical NLG baseline)")
    rw.add_argument("--out")
    rw.set_defaults(func=cmd_reward)

    tt = sub.add_parser("train-toy", help="train the template policy with REINFORCE")
    tt.add_argument("--bank", required=True)
    tt.add_argument("--truth", required=True)
    tt.add_argument("--config")
    tt.add_argument("--rules")
    tt.add_argument("--steps", type=int, default=500)
    tt.add_argument("--batch", type=int, default=32)
    tt.add_argument("--lr", type=float, default=0.1)
    tt.add_argument("--seed", type=int, default=0)
    tt.add_argument("--out", required=True)
    tt.set_defaults(func=cmd_train_toy)

    ev = sub.add_parser("evaluate", help="NLG and clinical scores for a generated corpus")
    ev.add_argument("--generated", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--rules")
    ev.add_argument("--config")
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--u-as", choices=["pos", "neg"])
    ev.set_defaults(func=cmd_evaluate)

    nn = sub.add_parser("nearest", help="1-NN retrieval baseline over embeddings")
    nn.add_argument("--query", required=True)
    nn.add_argument("--train", required=True)
    nn.add_argument("--train-reports", required=True)
    nn.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    nn.add_argument("--out", required=True)
    nn.set_defaults(func=cmd_nearest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        log.error("%s", exc.args[0] if isinstance(exc, KeyError) and exc.args else exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
