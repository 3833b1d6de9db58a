from degrade.clips import ClipRole
from degrade.dataset import SynthesizedDataset
from grounding.clients import build_mllm_client, build_text_encoder
from grounding.store import build_embedding_store, dataset_frames, degradation_term_counts
from pipeline.base import PipelineCommand
from pipeline.config import write_resolved_config
from pipeline.serializers import GroundRunSerializer


class Command(PipelineCommand):
    help = 'Ground every LQ frame of a dataset and build the embedding store.'
    serializer_class = GroundRunSerializer

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset')
        parser.add_argument('--out', help='Store directory; an existing store there is reused.')
        parser.add_argument('--client', help="'mock' or 'socket:<addr>'.")
        parser.add_argument('--encoder', help="'mock' or 'socket:<addr>'.")
        parser.add_argument('--candidates', nargs='+')
        parser.add_argument('--dim', type=int, help='Embedding dimension.')
        parser.add_argument('--encoder-seed', type=int)
        parser.add_argument('--jobs', type=int, help='Client requests in flight.')
        parser.add_argument('--count-terms', nargs='+', help='Report how many descriptions mention each term.')

    def run(self, config):
        dataset = SynthesizedDataset(config['dataset'])
        frames, labels = dataset_frames(dataset)
        client = build_mllm_client(config['client'], dataset.metadata_by_path(ClipRole.LQ))
        encoder = build_text_encoder(config['encoder'], dim=config['dim'], seed=config['encoder_seed'])
        store = build_embedding_store(
            frames, client, encoder, config['candidates'], config['out'], jobs=config['jobs'], labels=labels,
        )
        write_resolved_config(config['out'], config)
        self.stdout.write(self.style.SUCCESS(
            f"Store {config['out']}: {len(store)} frames, {client.calls} MLLM calls, "
            f"{encoder.calls} encoder calls"
        ))
        if config['count_terms']:
            counts = degradation_term_counts(store, config['count_terms'])
            width = max(len(term) for term in counts)
            self.stdout.write(f"{'Term'.ljust(width)}  Frames")
            for term, count in counts.items():
                self.stdout.write(f'{term.ljust(width)}  {count}')
