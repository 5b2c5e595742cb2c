import pytest

import glob
import json
import os

import numpy as np
from PIL import Image

import hita
import hita.checkpoint
import hita.quantizer
import hita_cli

SMALL = ['--synthetic',
         '--set', 'embed_dim=32', '--set', 'base_channels=16', '--set', 'semantic_dim=16',
         '--set', 'samples_per_class=8', '--set', 'ar_width=32', '--set', 'ar_layers=1']


def run(*argv):
    return hita_cli.main(list(argv) + SMALL)


@pytest.fixture()
def out_dir(tmpdir):
    return os.path.join(str(tmpdir), 'run')


@pytest.fixture()
def trained(out_dir):
    assert run('train-tokenizer', '--steps', '2', '--out', out_dir,
               '--log-file', os.path.join(out_dir, 'tokenizer.ndjson')) == 0
    return out_dir


def small_config():
    return hita.load_config(None, ['embed_dim=32', 'base_channels=16', 'semantic_dim=16',
                                   'samples_per_class=8', 'ar_width=32', 'ar_layers=1'])


def test_hita_cli_parser():
    args = hita_cli.build_parser().parse_args(['generate', '--class', '2', '--top-k', '5'])
    assert args.class_id == 2
    assert args.top_k == 5
    assert args.n is None
    assert args.fraction == '0.5'


def test_hita_cli_train_tokenizer(trained):
    assert os.path.exists(os.path.join(trained, hita_cli.TOKENIZER_CKPT))
    with open(os.path.join(trained, 'tokenizer.ndjson')) as fp:
        lines = [json.loads(line) for line in fp]
    assert [line['step'] for line in lines] == [0, 1, 1]
    assert 'total' in lines[0] and 'patch' in lines[-1]

    manifest = hita.checkpoint.read_manifest(os.path.join(trained, hita_cli.TOKENIZER_CKPT))
    assert manifest['fingerprint'] == small_config().fingerprint()
    assert manifest['step'] == 2


def test_hita_cli_missing_artifact(out_dir):
    assert run('train-ar', '--steps', '2', '--out', out_dir) == 1
    assert not os.path.exists(os.path.join(out_dir, hita_cli.AR_CKPT))


def test_hita_cli_bad_config(out_dir):
    assert hita_cli.main(['stats', '--out', out_dir, '--set', 'no_such_key=1']) == 1


def test_hita_cli_generate(trained):
    assert run('train-ar', '--steps', '2', '--out', trained) == 0
    assert os.path.exists(os.path.join(trained, hita_cli.TOKEN_DUMP))
    assert os.path.exists(os.path.join(trained, hita_cli.AR_CKPT))

    assert run('generate', '--out', trained, '--class', '1', '--cfg', '1.0', '--n', '4') == 0
    images = sorted(glob.glob(os.path.join(trained, 'generate', 'class1_*.png')))
    assert len(images) == 4
    assert Image.open(images[0]).size == (32, 32)

    config = small_config()
    dump = os.path.join(trained, 'generate', 'class1_tokens.bin')
    records = hita.quantizer.read_token_dump(dump, fingerprint=config.fingerprint32())
    assert len(records) == 4
    assert all(r['class_id'] == 1 for r in records)
    assert all(len(r['patch_ids']) == config.num_patches for r in records)


def test_hita_cli_stats(trained, capsys):
    path = os.path.join(trained, 'stats.json')
    assert run('stats', '--out', trained) == 0
    first_out = capsys.readouterr().out
    with open(path) as fp:
        first = json.load(fp)

    assert run('stats', '--out', trained) == 0
    second_out = capsys.readouterr().out
    with open(path) as fp:
        second = json.load(fp)

    assert first == second
    assert first_out == second_out
    # the whole held-out split by default
    assert first['num_images'] == 8
    assert first['frechet'] is not None
    assert 'holistic usage' in first_out
    assert 'frechet' in first_out

    assert run('stats', '--out', trained, '--n', '3') == 0
    with open(path) as fp:
        assert json.load(fp)['num_images'] == 3


def test_hita_cli_inpaint_full_visibility(trained, capsys):
    assert run('reconstruct', '--out', trained, '--n', '2') == 0
    assert run('inpaint', '--out', trained, '--n', '2', '--fraction', '1.0') == 0
    printed = capsys.readouterr().out
    assert 'fraction 1.00' in printed
    assert 'consistency' in printed and 'frechet' in printed

    for i in range(2):
        name = '{:04d}.png'.format(i)
        recon = np.asarray(Image.open(os.path.join(trained, 'reconstruct', name)))
        inpainted = np.asarray(Image.open(os.path.join(trained, 'inpaint', '1.00', name)))
        # panels: (original, reconstruction) and (original, partial, completion)
        assert np.array_equal(recon[:, 34:66], inpainted[:, 68:100])


def test_hita_cli_seeded(tmpdir):
    checksums = []
    for name in ('a', 'b'):
        out = os.path.join(str(tmpdir), name)
        assert run('train-tokenizer', '--steps', '2', '--seed', '3', '--out', out,
                   '--log-file', os.path.join(out, 'log.ndjson')) == 0
        tokenizer, manifest = hita.checkpoint.load_tokenizer(
            os.path.join(out, hita_cli.TOKENIZER_CKPT),
            hita.load_config(None, ['embed_dim=32', 'base_channels=16', 'semantic_dim=16',
                                    'samples_per_class=8', 'ar_width=32', 'ar_layers=1',
                                    'seed=3']))
        checksums.append((manifest['fingerprint'], hita.checkpoint.parameter_checksum(tokenizer)))
    assert checksums[0] == checksums[1]


def test_hita_cli_input_images_cover_classes():
    args = hita_cli.build_parser().parse_args(['inpaint', '--n', '4'] + SMALL)
    images = hita_cli.input_images(args, small_config())
    assert images.labels.tolist() == [0, 1, 2, 3]
