"""CSV and text-table writers for evaluation reports.

Numbers are written with fixed precision so that reruns with the same
checkpoint, dataset and seed produce byte-identical files.
"""
import csv
import io
import json

from degrade.clips import atomic_write_text

REPORT_FIELDS = ('analysis', 'protocol', 'interval_t', 'checkpoint', 'options', 'video_id', 'frames', 'psnr', 'ssim')
ALIGNMENT_FIELDS = ('video_id', 'frame_index', 'matched', 'shuffled', 'degenerate')
AVERAGE = 'Average'


def _options(report):
    return ';'.join(f'{key}={value}' for key, value in sorted(report.options.items()))


def report_rows(reports):
    for report in reports:
        base = {
            'analysis': report.analysis,
            'protocol': report.protocol,
            'interval_t': '' if report.interval_t is None else report.interval_t,
            'checkpoint': report.checkpoint,
            'options': _options(report),
        }
        for video in report.videos:
            yield {**base, 'video_id': video.video_id, 'frames': video.frames,
                   'psnr': f'{video.psnr:.4f}', 'ssim': f'{video.ssim:.6f}'}
        yield {**base, 'video_id': AVERAGE, 'frames': sum(video.frames for video in report.videos),
               'psnr': f'{report.psnr:.4f}', 'ssim': f'{report.ssim:.6f}'}


def write_reports_csv(path, reports):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_FIELDS, lineterminator='\n')
    writer.writeheader()
    writer.writerows(report_rows(reports))
    atomic_write_text(path, buffer.getvalue())
    return path


def format_table(reports):
    """Videos as rows, one PSNR/SSIM column pair per report, average last."""
    labels = [report.label for report in reports]
    video_ids = []
    for report in reports:
        video_ids.extend(video.video_id for video in report.videos if video.video_id not in video_ids)
    cells = {
        (report.label, video.video_id): (f'{video.psnr:.2f}', f'{video.ssim:.4f}')
        for report in reports for video in report.videos
    }
    for report in reports:
        cells[(report.label, AVERAGE)] = (f'{report.psnr:.2f}', f'{report.ssim:.4f}')

    name_width = max(len(name) for name in video_ids + [AVERAGE, 'Video'])
    widths = [max(len(label), 17) for label in labels]
    lines = [
        ' | '.join(['Video'.ljust(name_width)] + [label.center(w) for label, w in zip(labels, widths)]),
        ' | '.join([''.ljust(name_width)] + ['PSNR ↑   SSIM ↑'.center(w) for w in widths]),
    ]
    lines.append('-+-'.join('-' * w for w in [name_width] + widths))
    for video_id in video_ids + [AVERAGE]:
        row = [video_id.ljust(name_width)]
        for label, width in zip(labels, widths):
            psnr, ssim = cells.get((label, video_id), ('-', '-'))
            row.append(f'{psnr:>7} {ssim:>8}'.center(width))
        lines.append(' | '.join(row))
    return '\n'.join(lines) + '\n'


def write_table(path, reports):
    atomic_write_text(path, format_table(reports))
    return path


def write_alignment(out_dir, report):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=ALIGNMENT_FIELDS, lineterminator='\n')
    writer.writeheader()
    for row in report.frames:
        writer.writerow({**row, 'matched': f'{row["matched"]:.6f}', 'shuffled': f'{row["shuffled"]:.6f}',
                         'degenerate': int(row['degenerate'])})
    atomic_write_text(out_dir / 'alignment.csv', buffer.getvalue())
    atomic_write_text(out_dir / 'alignment.json', json.dumps(report.to_dict(), indent=2, sort_keys=True) + '\n')
    return out_dir / 'alignment.json'
