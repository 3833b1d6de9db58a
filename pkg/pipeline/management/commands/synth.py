from degrade.protocols import available_protocols
from degrade.synthesis import synthesize_dataset
from pipeline.base import PipelineCommand
from pipeline.config import write_resolved_config
from pipeline.serializers import SynthRunSerializer


class Command(PipelineCommand):
    help = 'Synthesize a paired LQ/GT video dataset under a degradation protocol.'
    serializer_class = SynthRunSerializer

    def add_run_arguments(self, parser):
        parser.add_argument('--protocol', help=f'One of {available_protocols()} or a protocol JSON file.')
        parser.add_argument('--src', help='Directory of source videos (one frame folder per video).')
        parser.add_argument('--out', help='Output dataset directory.')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--t', type=int, help='Frames between degradation changes.')
        parser.add_argument('--probability', type=float, help='Override the per-candidate inclusion probability.')
        parser.add_argument('--procedural', type=int, help='Generate N procedural source clips.')
        parser.add_argument('--jobs', type=int)
        parser.add_argument('--no-video-fallback', dest='video_fallback', action='store_false', default=None,
                            help='Fail instead of using the JPEG proxy when no video encoder is installed.')

    def run(self, config):
        manifest = synthesize_dataset(
            config['protocol'], config['src'], config['out'], config['seed'], config['t'],
            probability=config['probability'], procedural=config['procedural'], jobs=config['jobs'],
            allow_fallback=config['video_fallback'],
        )
        write_resolved_config(config['out'], config)
        self.stdout.write(self.style.SUCCESS(
            f"Synthesized {len(manifest['videos'])} videos ({manifest['protocol']['name']}, "
            f"t={config['t']}) into {config['out']}"
        ))
