from pathlib import Path

from degrade.dataset import SynthesizedDataset
from grounding.store import EmbeddingStore
from pipeline.base import PipelineCommand
from pipeline.config import write_resolved_config
from pipeline.serializers import TrainRunSerializer
from restoration.config import INJECTION_PRESETS, ModelConfig, injection_sites_for
from training.losses import LossConfig
from training.trainer import TrainConfig, train


class Command(PipelineCommand):
    help = 'Train the restoration network on a synthesized dataset and its embedding store.'
    serializer_class = TrainRunSerializer

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset')
        parser.add_argument('--store', help='Embedding store built by the ground command.')
        parser.add_argument('--out', help='Run directory for checkpoints and curves.')
        parser.add_argument('--iters', type=int)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--injection', choices=INJECTION_PRESETS, help='Decoders that receive the prompt.')
        parser.add_argument('--no-prompt', action='store_true', default=None,
                            help='Disable prompt generation and injection; the prompt loss weight becomes 0.')
        parser.add_argument('--no-history', action='store_true', default=None,
                            help='Drop the previous-frame fusion.')
        parser.add_argument('--stages', nargs='+', type=int, help='Encoder stage widths.')
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--crop', type=int)
        parser.add_argument('--window', type=int, help='Frames per training clip window.')
        parser.add_argument('--lr0', type=float)
        parser.add_argument('--lr-min', type=float)
        parser.add_argument('--warmup', type=int, help='Steps of linear LR warmup before the cosine decay.')
        parser.add_argument('--lambda1', type=float)
        parser.add_argument('--lambda2', type=float)
        parser.add_argument('--no-augment', dest='augment', action='store_false', default=None)
        parser.add_argument('--clip-grad', type=float)
        parser.add_argument('--checkpoint-every', type=int)

    def run(self, config):
        dataset = SynthesizedDataset(config['dataset'])
        no_prompt = config['no_prompt']
        store = None if no_prompt else EmbeddingStore.load(config['store'])
        stages = tuple(config['stages'])
        model_config = ModelConfig(
            stage_channels=stages,
            d=store.d if store is not None else None,
            history_mode='none' if config['no_history'] else 'gated_prev_frame',
            injection_sites=() if no_prompt else injection_sites_for(config['injection'], len(stages)),
        )
        train_config = TrainConfig(
            total_iters=config['iters'],
            batch_size=config['batch_size'],
            crop=config['crop'],
            window=config['window'],
            lr0=config['lr0'],
            lr_min=config['lr_min'],
            warmup_iters=config['warmup'],
            seed=config['seed'],
            augment=config['augment'],
            clip_grad=config['clip_grad'],
            checkpoint_every=config['checkpoint_every'],
        )
        loss_config = LossConfig.from_dict({
            'lambda1': config['lambda1'], 'lambda2': 0.0 if no_prompt else config['lambda2'],
        })
        write_resolved_config(config['out'], config)
        result = train(dataset, store, model_config, train_config, loss_config, out_dir=Path(config['out']))
        self.stdout.write(self.style.SUCCESS(
            f"Trained {config['iters']} steps; final checkpoint {result.checkpoint}"
        ))
