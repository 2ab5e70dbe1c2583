"""
Run Reporter for FDEN experiment directories

Consolidates the artifacts of one run directory (training curves, score files,
ablation comparisons between curve tags) into report.csv and summary.txt.
Inputs are verified against manifest.json and never modified.
"""

import json
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from fden_cli import MANIFEST, IntegrityError, MissingArtifactError
from fden_container import file_digest
from fden_model import smooth_curve

REPORT_COLUMNS = ['section', 'source', 'metric', 'value']
REPORT_FILE = 'report.csv'
SUMMARY_FILE = 'summary.txt'


class RunReporter:
    """
    Report generator for a single run directory.
    """

    def __init__(self, run_dir: str, window: int = 500):
        self.run_dir = run_dir
        self.window = window
        self.manifest: Dict = {}
        self.rows: List[Dict] = []
        self.missing_sections: List[str] = []

    def _path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def verify(self) -> Dict:
        """
        Load the manifest and check every listed artifact against its digest.

        Raises:
            MissingArtifactError: manifest or listed artifacts absent
            IntegrityError: an artifact's SHA-256 differs from the manifest
        """
        path = self._path(MANIFEST)
        if not os.path.exists(path):
            raise MissingArtifactError([MANIFEST])
        with open(path, 'r', encoding='utf-8') as fh:
            self.manifest = json.load(fh)
        artifacts = self.manifest.get('artifacts', {})
        missing = sorted(name for name in artifacts if not os.path.exists(self._path(name)))
        if missing:
            raise MissingArtifactError(missing)
        for name in sorted(artifacts):
            if file_digest(self._path(name)) != artifacts[name]:
                raise IntegrityError(f"{name} digest does not match manifest")
        return self.manifest

    def _artifacts(self, prefix: str) -> List[str]:
        return sorted(name for name in self.manifest.get('artifacts', {})
                      if name.startswith(prefix) and name.endswith('.csv'))

    def _add(self, section: str, source: str, metric: str, value: float):
        self.rows.append({'section': section, 'source': source, 'metric': metric,
                          'value': float(value)})

    def summarize_curves(self) -> Dict[str, Dict[str, float]]:
        """Final and peak smoothed L_M, final losses and step count per curves file."""
        summary = {}
        for name in self._artifacts('curves_'):
            df = pd.read_csv(self._path(name))
            if df.empty:
                continue
            smoothed = smooth_curve(df['loss_m'], self.window)
            stats = {
                'steps': float(df['step'].iloc[-1]),
                'final_loss_r': float(df['loss_r'].iloc[-1]),
                'final_loss_c': float(df['loss_c'].iloc[-1]),
                'final_loss_m_smoothed': float(smoothed[-1]),
                'max_loss_m_smoothed': float(np.max(smoothed)),
                'argmax_loss_m_smoothed': float(df['step'].iloc[int(np.argmax(smoothed))]),
            }
            if 'phase' in df.columns:
                switched = df.loc[df['phase'] == 2, 'step']
                stats['phase_switch_step'] = float(switched.iloc[0]) if len(switched) else -1.0
            tag = name[len('curves_'):-len('.csv')]
            summary[tag] = stats
            for metric, value in stats.items():
                self._add('curves', name, metric, value)
        if not summary:
            self.missing_sections.append('curves')
        return summary

    def summarize_scores(self) -> int:
        """Copy every score row into the report, sorted by source then metric."""
        count = 0
        for name in self._artifacts('scores_'):
            df = pd.read_csv(self._path(name)).sort_values('metric', kind='mergesort')
            for _, row in df.iterrows():
                self._add('scores', name, row['metric'], row['value'])
                count += 1
        if count == 0:
            self.missing_sections.append('scores')
        return count

    def compare_ablations(self, curves: Dict[str, Dict[str, float]]):
        """Differences of every curve tag against 'main' (or the first tag)."""
        if len(curves) < 2:
            self.missing_sections.append('ablation')
            return
        baseline = 'main' if 'main' in curves else sorted(curves)[0]
        for tag in sorted(curves):
            if tag == baseline:
                continue
            for metric in ('final_loss_r', 'final_loss_m_smoothed', 'max_loss_m_smoothed'):
                self._add('ablation', f'{tag}-vs-{baseline}', f'delta_{metric}',
                          curves[tag][metric] - curves[baseline][metric])

    def build(self) -> pd.DataFrame:
        self.rows, self.missing_sections = [], []
        self.verify()
        curves = self.summarize_curves()
        self.summarize_scores()
        self.compare_ablations(curves)
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def format_summary(self, report: pd.DataFrame) -> str:
        """
        Format the consolidated report as readable text.

        Args:
            report: DataFrame returned by build()

        Returns:
            Text summary (no timestamps, so re-runs are byte-identical)
        """
        lines = ["=" * 80, "FDEN RUN SUMMARY", "=" * 80]
        digests = sorted({c.get('config_digest', '') for c in self.manifest.get('commands', [])})
        lines.append(f"Run directory commands: {len(self.manifest.get('commands', []))}")
        lines.append(f"Config digests: {', '.join(d[:12] for d in digests) or '-'}")
        lines.append(f"Artifacts verified: {len(self.manifest.get('artifacts', {}))}")
        lines.append("")
        for section in ('curves', 'scores', 'ablation'):
            lines.append("-" * 80)
            lines.append(section.upper())
            lines.append("-" * 80)
            if section in self.missing_sections:
                lines.append(f"⚠️ no {section} artifacts in this run")
                lines.append("")
                continue
            part = report[report['section'] == section]
            for source, group in part.groupby('source', sort=True):
                lines.append(f"{source}:")
                for _, row in group.iterrows():
                    lines.append(f"  {row['metric']:<40} {row['value']:+.6f}")
            lines.append("")
        return "\n".join(lines) + "\n"

    def emit(self, verbose: bool = True) -> Tuple[pd.DataFrame, str]:
        report = self.build()
        report.to_csv(self._path(REPORT_FILE), index=False, encoding='utf-8', float_format='%.10g')
        summary = self.format_summary(report)
        with open(self._path(SUMMARY_FILE), 'w', encoding='utf-8') as fh:
            fh.write(summary)
        if verbose:
            print(summary)
            for section in self.missing_sections:
                print(f"⚠️ missing section: {section}")
            print(f"✅ report written to: {self._path(REPORT_FILE)}")
        return report, summary


def emit_report(run_dir: str, verbose: bool = True, window: Optional[int] = None) -> pd.DataFrame:
    """
    Consolidate a run directory into report.csv and summary.txt.

    Args:
        run_dir: directory holding manifest.json and the run's artifacts
        verbose: print the summary
        window: smoothing window for L_M curves

    Returns:
        The consolidated report DataFrame
    """
    reporter = RunReporter(run_dir, window if window is not None else 500)
    report, _ = reporter.emit(verbose)
    return report
