"""The eight flip/rotation transforms, applied identically to LQ and GT."""
import torch

# (quarter turns, horizontal flip first); id 0 is the identity.
TRANSFORMS = tuple((turns, flip) for flip in (False, True) for turns in range(4))
TRANSFORM_NAMES = (
    'identity', 'rot90', 'rot180', 'rot270',
    'hflip', 'hflip_rot90', 'hflip_rot180', 'hflip_rot270',
)


def apply_transform(x, transform_id):
    turns, flip = TRANSFORMS[transform_id]
    if flip:
        x = torch.flip(x, dims=(-1,))
    return torch.rot90(x, turns, dims=(-2, -1))


def invert_transform(x, transform_id):
    turns, flip = TRANSFORMS[transform_id]
    x = torch.rot90(x, -turns, dims=(-2, -1))
    if flip:
        x = torch.flip(x, dims=(-1,))
    return x


def augment(lq, gt, rng):
    transform_id = int(rng.integers(len(TRANSFORMS)))
    return apply_transform(lq, transform_id), apply_transform(gt, transform_id), transform_id
