"""Token-classification finetuning and hidden-state export for a BERT-style model.

Invoked by the ctiner external provider:

    finetune_bert.py finetune --model DIR --train T.conll --valid V.conll --labels L.txt --out DIR [...]
    finetune_bert.py encode --model DIR --input sentences.jsonl --out states.jsonl

`encode` writes one JSON object per sentence with the word-piece strings, the
word index of every piece and the last-layer hidden state of every piece.
Special markers ([CLS], [SEP]) are dropped.
"""

import argparse
import json
import math
import random
import sys


def die_unavailable(msg):
    print(f"external model unavailable: {msg}", file=sys.stderr)
    sys.exit(3)


try:
    import torch
    from transformers import AutoModel, AutoModelForTokenClassification, AutoTokenizer
except ImportError as e:  # pragma: no cover
    die_unavailable(f"python dependencies missing ({e}); install torch and transformers")


def read_conll(path):
    sents, words, labels = [], [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            cols = line.split()
            if not cols:
                if words:
                    sents.append((words, labels))
                    words, labels = [], []
                continue
            words.append(cols[0])
            labels.append(cols[-1])
    if words:
        sents.append((words, labels))
    return sents


def spans(labels):
    out, cur = set(), None
    for i, lab in enumerate(labels + ["O"]):
        if cur and not (lab.startswith("I-") and lab[2:] == cur[0]):
            out.add((cur[0], cur[1], i - 1))
            cur = None
        if lab.startswith("B-") or (lab.startswith("I-") and cur is None):
            cur = (lab[2:], i)
    return out


def load_tokenizer(path, uncased):
    try:
        return AutoTokenizer.from_pretrained(path, do_lower_case=uncased)
    except (OSError, ValueError) as e:
        die_unavailable(f"cannot load tokenizer from {path}: {e}")


def encode_batch(tok, batch, max_len):
    enc = tok([w for w, _ in batch], is_split_into_words=True, truncation=True,
              max_length=max_len, padding=True, return_tensors="pt")
    return enc


def aligned_labels(enc, batch, label_ids):
    rows = []
    for b, (_, labels) in enumerate(batch):
        prev, row = None, []
        for wid in enc.word_ids(b):
            if wid is None or wid == prev:
                row.append(-100)
            else:
                row.append(label_ids[labels[wid]])
            prev = wid
        rows.append(row)
    return torch.tensor(rows)


def predict(model, tok, sents, labels, max_len, batch_size):
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(sents), batch_size):
            batch = sents[i:i + batch_size]
            enc = encode_batch(tok, batch, max_len)
            logits = model(**enc).logits.argmax(-1)
            for b, (words, _) in enumerate(batch):
                out = ["O"] * len(words)
                prev = None
                for j, wid in enumerate(enc.word_ids(b)):
                    if wid is not None and wid != prev:
                        out[wid] = labels[logits[b, j].item()]
                    prev = wid
                preds.append(out)
    return preds


def strict_f1(gold, pred):
    g = {(k,) + s for k, labs in enumerate(gold) for s in spans(labs)}
    p = {(k,) + s for k, labs in enumerate(pred) for s in spans(labs)}
    c = len(g & p)
    prec = c / len(p) if p else 0.0
    rec = c / len(g) if g else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0


def finetune(a):
    random.seed(a.seed)
    torch.manual_seed(a.seed)
    with open(a.labels, encoding="utf-8") as f:
        labels = [l.strip() for l in f if l.strip()]
    label_ids = {l: i for i, l in enumerate(labels)}
    train, valid = read_conll(a.train), read_conll(a.valid)
    tok = load_tokenizer(a.model, a.uncased)
    try:
        model = AutoModelForTokenClassification.from_pretrained(
            a.model, num_labels=len(labels), hidden_dropout_prob=a.dropout,
            id2label=dict(enumerate(labels)), label2id=label_ids)
    except (OSError, ValueError) as e:
        die_unavailable(f"cannot load model from {a.model}: {e}")
    no_decay = ("bias", "LayerNorm.weight")
    groups = [
        {"params": [p for n, p in model.named_parameters() if not n.endswith(no_decay)],
         "weight_decay": a.weight_decay},
        {"params": [p for n, p in model.named_parameters() if n.endswith(no_decay)],
         "weight_decay": 0.0},
    ]
    opt = torch.optim.AdamW(groups, lr=a.lr)
    steps_per_epoch = math.ceil(len(train) / a.batch_size)
    total = steps_per_epoch * a.epochs
    warmup = math.ceil(a.warmup * total)

    def factor(step):
        w = (step + 1) / warmup if step < warmup else 1.0
        return w * (1.0 - a.lr_decay) ** (step // steps_per_epoch)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    best = -1.0
    for epoch in range(a.epochs):
        model.train()
        order = list(range(len(train)))
        random.shuffle(order)
        total_loss = 0.0
        for i in range(0, len(order), a.batch_size):
            batch = [train[j] for j in order[i:i + a.batch_size]]
            enc = encode_batch(tok, batch, a.max_len)
            out = model(**enc, labels=aligned_labels(enc, batch, label_ids))
            out.loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            opt.zero_grad()
            total_loss += out.loss.item()
        f1 = strict_f1([l for _, l in valid], predict(model, tok, valid, labels, a.max_len, a.batch_size))
        print(json.dumps({"epoch": epoch + 1, "loss": total_loss, "valid_f1": f1}), flush=True)
        if f1 > best:
            best = f1
            model.save_pretrained(a.out)
            tok.save_pretrained(a.out)


def encode(a):
    tok = load_tokenizer(a.model, a.uncased)
    try:
        model = AutoModel.from_pretrained(a.model)
    except (OSError, ValueError) as e:
        die_unavailable(f"cannot load model from {a.model}: {e}")
    model.eval()
    with open(a.input, encoding="utf-8") as f:
        items = [json.loads(l) for l in f if l.strip()]
    with open(a.out, "w", encoding="utf-8") as out, torch.no_grad():
        for i in range(0, len(items), a.batch_size):
            batch = items[i:i + a.batch_size]
            enc = encode_batch(tok, [(it["words"], None) for it in batch], a.max_len)
            hidden = model(**enc).last_hidden_state
            for b, it in enumerate(batch):
                ids = enc["input_ids"][b].tolist()
                word_ids, pieces, states = [], [], []
                for j, wid in enumerate(enc.word_ids(b)):
                    if wid is None:
                        continue
                    word_ids.append(wid)
                    pieces.append(tok.convert_ids_to_tokens(ids[j]))
                    states.append([float(x) for x in hidden[b, j].tolist()])
                out.write(json.dumps({"id": it["id"], "words": it["words"], "pieces": pieces,
                                      "word_ids": word_ids, "states": states}) + "\n")


def main():
    p = argparse.ArgumentParser()
    sub = p.add_subparsers(dest="cmd", required=True)
    ft = sub.add_parser("finetune")
    ft.add_argument("--train", required=True)
    ft.add_argument("--valid", required=True)
    ft.add_argument("--labels", required=True)
    ft.add_argument("--epochs", type=int, default=100)
    ft.add_argument("--lr", type=float, default=5e-5)
    ft.add_argument("--dropout", type=float, default=0.5)
    ft.add_argument("--warmup", type=float, default=0.002)
    ft.add_argument("--weight-decay", type=float, default=1e-5)
    ft.add_argument("--lr-decay", type=float, default=1e-5)
    ft.add_argument("--seed", type=int, default=0)
    enc = sub.add_parser("encode")
    enc.add_argument("--input", required=True)
    for s in (ft, enc):
        s.add_argument("--model", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--batch-size", type=int, default=32)
        s.add_argument("--max-len", type=int, default=512)
        s.add_argument("--cased", dest="uncased", action="store_false")
    a = p.parse_args()
    finetune(a) if a.cmd == "finetune" else encode(a)


if __name__ == "__main__":
    main()
