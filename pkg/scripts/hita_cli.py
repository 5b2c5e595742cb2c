#!/usr/bin/env python
"""Train and use a holistic-to-local image tokenizer and its AR generator.

Stages share one output directory (`--out`):

    tokenizer.ckpt        train-tokenizer
    tokens.bin            train-ar (token dump of the corpus)
    ar.ckpt               train-ar

To Use
------
A fully offline desk run on the procedural corpus:
```
$ ./scripts/hita_cli.py train-tokenizer --config configs/desk.cfg --synthetic \
    --steps 200 --out runs/desk --log-file runs/desk/tokenizer.ndjson
$ ./scripts/hita_cli.py train-ar --config configs/desk.cfg --synthetic --out runs/desk
$ ./scripts/hita_cli.py generate --config configs/desk.cfg --out runs/desk \
    --class 2 --n 4 --cfg 1.5 --jobs 2
$ ./scripts/hita_cli.py inpaint --config configs/desk.cfg --synthetic --out runs/desk \
    --fraction 0.25,0.5,0.75
$ ./scripts/hita_cli.py stats --config configs/desk.cfg --synthetic --out runs/desk
```
A class-structured image directory can replace `--synthetic` via `--data`
or the HITA_DATA environment variable.
"""
import argparse
import json
import logging
import os
import sys

import jinja2
from joblib import Parallel, delayed
import numpy as np
import torch

import hita
from hita import applications, checkpoint, data, gpt, quantizer, train
from hita.errors import DependencyError, HitaError, ValidationError
from hita.providers import get_provider

logger = logging.getLogger("hita_cli")

TOKENIZER_CKPT = 'tokenizer.ckpt'
AR_CKPT = 'ar.ckpt'
TOKEN_DUMP = 'tokens.bin'
DEFAULT_SAMPLES = 4


def load_settings(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append('seed={}'.format(args.seed))
    return hita.load_config(args.config, overrides)


def load_corpus(args, config):
    return data.ingest_dataset(args.data, config, synthetic=args.synthetic,
                               num_cpus=args.jobs, verbose=args.verbose)


def artifact(args, name):
    '''Path of a required artifact under --out.

    Raises
    ------
    DependencyError if it does not exist yet.
    '''
    path = os.path.join(args.out, name)
    if not os.path.exists(path):
        raise DependencyError('missing required artifact {}'.format(path))
    return path


def open_log(args):
    if args.log_file:
        os.makedirs(os.path.dirname(os.path.abspath(args.log_file)), exist_ok=True)
        return open(args.log_file, 'w')
    return sys.stdout


def input_images(args, config, corpus_fallback=True):
    if args.image:
        pixels = [data.load_image(path, config.image_size, config.resize_filter, strict=True)
                  for path in args.image]
        labels = torch.full((len(pixels),), args.class_id or 0, dtype=torch.long)
        return data.ImageBatch(torch.from_numpy(np.stack(pixels)), labels)
    if not corpus_fallback:
        raise ValidationError('no input images given')
    return load_corpus(args, config).stratified(args.n or DEFAULT_SAMPLES)


def cmd_train_tokenizer(args):
    config = load_settings(args)
    corpus = load_corpus(args, config)
    log_fp = open_log(args)
    try:
        run = train.train_tokenizer(config, corpus, steps=args.steps, log_fp=log_fp,
                                    progress=args.verbose > 0)
    finally:
        if log_fp is not sys.stdout:
            log_fp.close()

    usage = dict(run.usage[-1]) if run.usage else None
    checkpoint.save_checkpoint(os.path.join(args.out, TOKENIZER_CKPT), run.tokenizer, config,
                               checkpoint.TOKENIZER, step=len(run.reports), usage=usage)
    return 0


def cmd_train_ar(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    corpus = load_corpus(args, config)

    dump_path = os.path.join(args.out, TOKEN_DUMP)
    holistic, patch, labels = train.tokenize_corpus(tokenizer, corpus)
    quantizer.write_token_dump(dump_path, train.token_records(config, holistic, patch, labels))
    logger.info('wrote %d token records to %s', len(labels), dump_path)

    records = quantizer.read_token_dump(dump_path, fingerprint=config.fingerprint32())
    holistic = np.array([r['holistic_ids'] for r in records], dtype=np.int64)
    holistic = holistic.reshape(len(records), config.num_holistic)
    patch = np.array([r['patch_ids'] for r in records], dtype=np.int64)
    labels = np.array([r['class_id'] for r in records], dtype=np.int64)

    log_fp = open_log(args)
    try:
        run = train.train_ar(config, holistic, patch, labels, steps=args.steps, log_fp=log_fp,
                             progress=args.verbose > 0)
    finally:
        if log_fp is not sys.stdout:
            log_fp.close()

    checkpoint.save_checkpoint(os.path.join(args.out, AR_CKPT), run.model, config,
                               checkpoint.AR_MODEL, step=len(run.reports))
    return 0


def cmd_reconstruct(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    images = input_images(args, config)
    output = tokenizer.reconstruct(images)

    for i in range(images.batch_size):
        path = os.path.join(args.out, 'reconstruct', '{:04d}.png'.format(i))
        data.save_panel(path, images.pixels[i], output.pixels[i])
    logger.info('wrote %d reconstructions', images.batch_size)
    return 0


def generate_one(model, class_id, seed, cfg_scale, temperature, top_k):
    generator = torch.Generator().manual_seed(seed)
    class_ids = torch.tensor([class_id], dtype=torch.long)
    return gpt.generate(model, class_ids, cfg_scale, temperature, top_k, generator)[0]


def cmd_generate(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    model, _ = checkpoint.load_ar_model(artifact(args, AR_CKPT), config)
    class_id = args.class_id or 0
    cfg_scale = config.cfg_scale if args.cfg is None else args.cfg
    temperature = config.temperature if args.temperature is None else args.temperature
    top_k = config.top_k if args.top_k is None else args.top_k
    n = args.n or DEFAULT_SAMPLES

    # one generator per sample, so results do not depend on --jobs
    pool = Parallel(n_jobs=args.jobs, verbose=args.verbose, prefer='threads')
    dfx = delayed(generate_one)
    seqs = pool(dfx(model, class_id, config.seed * 100003 + i, cfg_scale, temperature, top_k)
                for i in range(n))
    ids = torch.stack(seqs)

    m = config.num_holistic
    images = tokenizer.decode_tokens(ids[:, :m], ids[:, m:])
    for i in range(n):
        data.save_png(os.path.join(args.out, 'generate',
                                   'class{}_{:04d}.png'.format(class_id, i)), images.pixels[i])

    labels = np.full(n, class_id)
    dump_path = os.path.join(args.out, 'generate', 'class{}_tokens.bin'.format(class_id))
    quantizer.write_token_dump(dump_path, train.token_records(
        config, ids[:, :m].numpy(), ids[:, m:].numpy(), labels))
    logger.info('generated %d images of class %d', n, class_id)
    return 0


def cmd_style_transfer(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    if not args.content or not args.reference:
        raise ValidationError('style-transfer needs --content and --reference')

    load = lambda path: data.load_image(path, config.image_size, config.resize_filter,
                                        strict=True)
    content = data.ImageBatch(torch.from_numpy(load(args.content)[None]))
    reference = data.ImageBatch(torch.from_numpy(load(args.reference)[None]))
    output = applications.style_transfer(tokenizer, content, reference)

    path = os.path.join(args.out, 'style_transfer.png')
    data.save_panel(path, content.pixels[0], reference.pixels[0], output.pixels[0])
    logger.info('wrote %s', path)
    return 0


def parse_fractions(text):
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise ValidationError('invalid --fraction list {!r}'.format(text))


def cmd_inpaint(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    fractions = parse_fractions(args.fraction)
    needs_model = args.generate_holistic or any(f < 1 for f in fractions)
    model = (checkpoint.load_ar_model(artifact(args, AR_CKPT), config)[0]
             if needs_model else None)

    images = input_images(args, config)
    class_ids = (torch.full((images.batch_size,), args.class_id, dtype=torch.long)
                 if args.class_id is not None else images.labels)
    cfg_scale = config.cfg_scale if args.cfg is None else args.cfg
    temperature = config.temperature if args.temperature is None else args.temperature
    top_k = config.top_k if args.top_k is None else args.top_k
    provider = get_provider(config.perceptual_provider, out_dim=config.semantic_dim,
                            command=config.semantic_command)

    points, completions = applications.inpainting_sweep(
        tokenizer, model, images, fractions, provider, cfg_scale, temperature, top_k,
        seed=config.seed, class_ids=class_ids, generate_holistic=args.generate_holistic,
        keep_images=True)
    for point, completed in zip(points, completions):
        _, visible_px = applications.visible_rows(point['fraction'], config)
        partial = applications.mask_lower(images, visible_px)
        for i in range(images.batch_size):
            path = os.path.join(args.out, 'inpaint', '{:.2f}'.format(point['fraction']),
                                '{:04d}.png'.format(i))
            data.save_panel(path, images.pixels[i], partial.pixels[i], completed.pixels[i])
        print(render_template('sweep.txt', point=point))
    return 0


def cmd_probe(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    corpus = load_corpus(args, config)
    accuracy = applications.probe_tokenizer(tokenizer, corpus, seed=config.seed)
    print('probe accuracy {:.4f}'.format(accuracy))
    return 0


def render_template(name, **context):
    path = os.path.dirname(os.path.abspath(__file__))
    loader = jinja2.FileSystemLoader(os.path.join(path, 'templates'))
    template_env = jinja2.Environment(loader=loader)
    return template_env.get_template(name).render(**context)


def render_stats(stats):
    books = [dict(name='holistic', usage=stats['holistic_usage'], bound=stats['holistic_bound']),
             dict(name='patch', usage=stats['patch_usage'], bound=stats['patch_bound'])]
    return render_template('stats.txt', stats=stats, books=books)


def cmd_stats(args):
    config = load_settings(args)
    tokenizer, _ = checkpoint.load_tokenizer(artifact(args, TOKENIZER_CKPT), config)
    _, held_out = load_corpus(args, config).split()
    if args.n:
        held_out = held_out.take(args.n)
    provider = get_provider(config.perceptual_provider, out_dim=config.semantic_dim,
                            command=config.semantic_command)

    stats = train.evaluate_reconstruction(tokenizer, held_out, provider=provider)
    with open(os.path.join(args.out, 'stats.json'), 'w') as fp:
        json.dump(stats, fp, indent=2)
    print(render_stats(stats))
    return 0


COMMANDS = {
    'train-tokenizer': cmd_train_tokenizer,
    'train-ar': cmd_train_ar,
    'reconstruct': cmd_reconstruct,
    'generate': cmd_generate,
    'style-transfer': cmd_style_transfer,
    'inpaint': cmd_inpaint,
    'probe': cmd_probe,
    'stats': cmd_stats,
}


def build_parser():
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS),
                        help="Pipeline stage to run.")
    parser.add_argument("--config",
                        metavar="config", type=str, default=None,
                        help="Path to a key-value config file; defaults to the desk profile.")
    parser.add_argument("--set",
                        metavar="key=value", action='append', default=[],
                        help="Config override; may be repeated.")
    parser.add_argument("--data",
                        metavar="data", type=str, default=None,
                        help="Dataset root with one subdirectory per class (or HITA_DATA).")
    parser.add_argument("--synthetic",
                        action='store_true',
                        help="Use the procedural class-structured corpus.")
    parser.add_argument("--out",
                        metavar="out", type=str, default='runs/desk',
                        help="Directory holding checkpoints, token dumps and images.")
    parser.add_argument("--seed",
                        metavar="seed", type=int, default=None,
                        help="Overrides the config seed.")
    parser.add_argument("--steps",
                        metavar="steps", type=int, default=None,
                        help="Training steps; defaults to the config value.")
    parser.add_argument("--class",
                        dest="class_id", metavar="class", type=int, default=None,
                        help="Class index to condition on.")
    parser.add_argument("--n",
                        metavar="n", type=int, default=None,
                        help="Number of images to generate or process (default 4); "
                             "stats covers the whole held-out split unless given.")
    parser.add_argument("--cfg",
                        metavar="cfg", type=float, default=None,
                        help="Classifier-free guidance scale (>= 1).")
    parser.add_argument("--temperature",
                        metavar="temperature", type=float, default=None,
                        help="Sampling temperature; 0 is greedy.")
    parser.add_argument("--top-k",
                        dest="top_k", metavar="top_k", type=int, default=None,
                        help="Restrict sampling to the k most likely ids; 0 disables.")
    parser.add_argument("--fraction",
                        metavar="fraction", type=str, default='0.5',
                        help="Visible fraction(s) for inpainting, comma separated.")
    parser.add_argument("--generate-holistic",
                        dest="generate_holistic", action='store_true',
                        help="Sample holistic tokens instead of encoding them "
                             "from the partial image.")
    parser.add_argument("--image",
                        metavar="image", type=str, action='append', default=[],
                        help="Input image path; may be repeated.")
    parser.add_argument("--content",
                        metavar="content", type=str, default=None,
                        help="Content image for style transfer.")
    parser.add_argument("--reference",
                        metavar="reference", type=str, default=None,
                        help="Reference image for style transfer.")
    parser.add_argument("--jobs",
                        metavar="jobs", type=int, default=1,
                        help="Number of parallel workers.")
    parser.add_argument("--log-file",
                        dest="log_file", metavar="log_file", type=str, default=None,
                        help="Write NDJSON training records here instead of stdout.")
    parser.add_argument("--verbose",
                        metavar="verbose", type=int, default=0,
                        help="Verbosity level; > 0 logs debug output and progress bars.")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    os.makedirs(args.out, exist_ok=True)
    try:
        return COMMANDS[args.command](args)
    except HitaError as derp:
        logger.error('%s: %s', type(derp).__name__, derp)
        return 1


if __name__ == '__main__':
    sys.exit(main())
