from pathlib import Path

from degrade.dataset import SynthesizedDataset
from evaluation.analysis import (
    evaluate, export_prompt_embeddings, identity, oracle, perturb_prompts_eval, prompt_alignment,
)
from evaluation.reports import format_table, write_alignment, write_reports_csv, write_table
from grounding.store import EmbeddingStore
from pipeline.base import PipelineCommand
from pipeline.config import write_resolved_config
from pipeline.serializers import ANALYSES, EvalRunSerializer


class Command(PipelineCommand):
    help = 'Score a checkpoint and run the prompt analyses.'
    serializer_class = EvalRunSerializer

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint')
        parser.add_argument('--dataset')
        parser.add_argument('--store', help='Embedding store, needed by oracle and alignment.')
        parser.add_argument('--out', help='Report directory.')
        parser.add_argument('--analysis', nargs='+', choices=ANALYSES)
        parser.add_argument('--noise-sigma', type=float, help='Prompt perturbation strength.')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--jobs', type=int, help='Videos scored in parallel.')

    def run(self, config):
        dataset = SynthesizedDataset(config['dataset'])
        out = Path(config['out'])
        out.mkdir(parents=True, exist_ok=True)
        store = EmbeddingStore.load(config['store']) if config['store'] else None
        checkpoint, jobs = config['checkpoint'], config['jobs']

        reports = []
        for analysis in config['analysis']:
            if analysis == 'identity':
                reports.append(identity(dataset, jobs=jobs))
            elif analysis == 'evaluate':
                reports.append(evaluate(checkpoint, dataset, jobs=jobs))
            elif analysis == 'oracle':
                reports.append(oracle(checkpoint, dataset, store, jobs=jobs))
            elif analysis == 'perturb':
                reports.append(perturb_prompts_eval(checkpoint, dataset, config['noise_sigma'],
                                                    seed=config['seed'], jobs=jobs))
            elif analysis == 'alignment':
                report = prompt_alignment(checkpoint, dataset, store, seed=config['seed'])
                write_alignment(out, report)
                stats = report.to_dict()
                self.stdout.write(
                    f"Alignment over {stats['frames']} frames: matched mean {stats['matched']['mean']:.4f}, "
                    f"shuffled mean {stats['shuffled']['mean']:.4f}, gap {stats['gap']:.4f}"
                )
            elif analysis == 'export':
                exported = export_prompt_embeddings(checkpoint, dataset, out / 'prompt_embeddings')
                self.stdout.write(f'Exported {len(exported)} prompts to {out / "prompt_embeddings"}')

        if reports:
            write_reports_csv(out / 'reports.csv', reports)
            write_table(out / 'table.txt', reports)
            self.stdout.write(format_table(reports))
        write_resolved_config(out, config)
        self.stdout.write(self.style.SUCCESS(f'Reports written to {out}'))
