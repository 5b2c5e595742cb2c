class Record(dict):
    FIELDS = []


class LossReport(Record):
    '''Per-step tokenizer loss record'''
    FIELDS = ['step', 'l2', 'perceptual', 'adversarial', 'vq_holistic',
              'vq_patch', 'total']

    def __init__(self, step, l2, perceptual, adversarial, vq_holistic, vq_patch,
                 total):
        super().__init__(step=step, l2=l2, perceptual=perceptual,
                         adversarial=adversarial, vq_holistic=vq_holistic,
                         vq_patch=vq_patch, total=total)


class ARReport(Record):
    '''Per-step autoregressive training record'''
    FIELDS = ['step', 'cross_entropy', 'learning_rate']

    def __init__(self, step, cross_entropy, learning_rate):
        super().__init__(step=step, cross_entropy=cross_entropy,
                         learning_rate=learning_rate)


class UsageReport(Record):
    '''Codebook usage over one evaluation window.

    A book that does not exist, or whose codes never reach the decoder,
    reports None.
    '''
    FIELDS = ['step', 'holistic', 'patch', 'holistic_perplexity',
              'patch_perplexity']

    def __init__(self, step, holistic, patch, holistic_perplexity=None,
                 patch_perplexity=None):
        super().__init__(step=step, holistic=holistic, patch=patch,
                         holistic_perplexity=holistic_perplexity,
                         patch_perplexity=patch_perplexity)


class StatsReport(Record):
    '''Held-out tokenizer statistics.

    `holistic_bound` and `patch_bound` are the largest usage a book can
    reach over the pass: min(1, images * positions / N). `frechet` is the
    feature distance between originals and their
    reconstructions, None when it was not measured.
    '''
    FIELDS = ['num_images', 'num_holistic', 'num_patches', 'seq_len',
              'codebook_size', 'holistic_usage', 'patch_usage', 'holistic_bound',
              'patch_bound', 'l2', 'fingerprint', 'frechet']

    def __init__(self, num_images, num_holistic, num_patches, seq_len,
                 codebook_size, holistic_usage, patch_usage, holistic_bound,
                 patch_bound, l2, fingerprint, frechet=None):
        super().__init__(
            num_images=num_images, num_holistic=num_holistic,
            num_patches=num_patches, seq_len=seq_len, codebook_size=codebook_size,
            holistic_usage=holistic_usage, patch_usage=patch_usage,
            holistic_bound=holistic_bound, patch_bound=patch_bound, l2=l2,
            fingerprint=fingerprint, frechet=frechet)


class SweepPoint(Record):
    '''Inpainting quality at one visible fraction.

    `frechet` is the feature distance between completions and their sources,
    None when no provider features are available.
    '''
    FIELDS = ['fraction', 'visible_rows', 'consistency', 'accuracy', 'frechet']

    def __init__(self, fraction, visible_rows, consistency, accuracy=None,
                 frechet=None):
        super().__init__(fraction=fraction, visible_rows=visible_rows,
                         consistency=consistency, accuracy=accuracy,
                         frechet=frechet)


class TokenRecord(Record):
    '''One image as discrete ids, as stored in a token dump'''
    FIELDS = ['num_holistic', 'num_patches', 'codebook_size', 'fingerprint',
              'class_id', 'holistic_ids', 'patch_ids']

    def __init__(self, num_holistic, num_patches, codebook_size, fingerprint,
                 class_id, holistic_ids, patch_ids):
        super().__init__(num_holistic=num_holistic, num_patches=num_patches,
                         codebook_size=codebook_size, fingerprint=fingerprint,
                         class_id=class_id, holistic_ids=list(holistic_ids),
                         patch_ids=list(patch_ids))


class CheckpointManifest(Record):
    '''Metadata stored alongside the tensors of a checkpoint.

    `parameters` lists one dict per tensor: name, shape and dtype.
    '''
    FIELDS = ['format_version', 'kind', 'fingerprint', 'config', 'parameters',
              'usage', 'step']

    def __init__(self, format_version, kind, fingerprint, config, parameters,
                 usage=None, step=0):
        super().__init__(format_version=format_version, kind=kind,
                         fingerprint=fingerprint, config=config,
                         parameters=parameters, usage=usage, step=step)

