import glob
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.pdfgen import canvas
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from core.exceptions import InputError

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = '_manifest.json'
PREVIEW_IMAGES = ('leaf_overlay.png', 'plant_overlay.png', 'heatmap_preview.png', 'orthomosaic.png')


@dataclass
class RunManifest:
    """Record of one subcommand run: what went in, what came out and how long it took."""
    subcommand: str
    config_hash: str
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))

    def timed(self, stage: str, start: float) -> None:
        self.timings[stage] = round(time.perf_counter() - start, 6)


def write_manifest(manifest: RunManifest, output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, f"{manifest.subcommand}{MANIFEST_SUFFIX}")
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True, default=str)
    logger.info(f"Manifest written to {path}")
    return path


def load_manifests(output_dir: str) -> List[RunManifest]:
    manifests = []
    for path in sorted(glob.glob(os.path.join(output_dir, f"*{MANIFEST_SUFFIX}"))):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                manifests.append(RunManifest(**json.load(f)))
        except (json.JSONDecodeError, TypeError) as e:
            logger.warning(f"Skipping unreadable manifest {path}: {e}")
    return manifests


class NumberedCanvas(canvas.Canvas):
    def __init__(self, *args, **kwargs):
        canvas.Canvas.__init__(self, *args, **kwargs)
        self._saved_page_states = []

    def showPage(self):
        self._saved_page_states.append(dict(self.__dict__))
        self._startPage()

    def save(self):
        """Add page x of y to each page"""
        num_pages = len(self._saved_page_states)
        for page_num, page_state in enumerate(self._saved_page_states):
            self.__dict__.update(page_state)
            self.setFont("Helvetica", 9)
            self.setFillColor(colors.grey)
            self.drawRightString(A4[0] - 0.5 * inch, 0.5 * inch, f"Page {page_num + 1} of {num_pages}")
            self.drawString(0.5 * inch, 0.5 * inch, "Field Phenotyping Run Report")
            canvas.Canvas.showPage(self)
        canvas.Canvas.save(self)


class RunReportGenerator:
    """PDF summary of every manifest (and preview image) found in an output directory"""

    def __init__(self, output_dir: str, filename: str = 'run_report.pdf'):
        self.output_dir = output_dir
        self.filename = filename
        styles = getSampleStyleSheet()
        self.title_style = ParagraphStyle('ReportTitle', parent=styles['Title'], fontSize=20,
                                          alignment=TA_CENTER, textColor=colors.HexColor('#1f4e79'))
        self.heading_style = ParagraphStyle('ReportHeading', parent=styles['Heading2'],
                                            textColor=colors.HexColor('#2e5984'))
        self.normal_style = styles['Normal']

    def _table(self, rows: List[List[str]]) -> Table:
        table = Table(rows, hAlign='LEFT')
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#1f4e79')),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.lightgrey),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#f2f2f2')]),
        ]))
        return table

    def _manifest_section(self, manifest: RunManifest) -> list:
        story = [Paragraph(f"Stage: {manifest.subcommand}", self.heading_style),
                 Paragraph(f"Started {manifest.started}; config hash {manifest.config_hash[:16]}...",
                           self.normal_style)]
        rows = [['Item', 'Value']]
        rows += [[f"input: {k}", str(v)] for k, v in sorted(manifest.inputs.items())]
        rows += [[f"result: {k}", f"{v:.6g}" if isinstance(v, float) else str(v)]
                 for k, v in sorted(manifest.results.items())]
        rows += [[f"time: {k}", f"{v:.3f} s"] for k, v in sorted(manifest.timings.items())]
        if manifest.seed is not None:
            rows.append(['seed', str(manifest.seed)])
        story += [Spacer(1, 4), self._table(rows), Spacer(1, 10)]
        return story

    def generate(self) -> str:
        manifests = load_manifests(self.output_dir)
        if not manifests:
            raise InputError(f"No run manifests found in {self.output_dir}")
        path = os.path.join(self.output_dir, self.filename)
        doc = SimpleDocTemplate(path, pagesize=A4, rightMargin=0.75 * inch, leftMargin=0.75 * inch,
                                topMargin=0.9 * inch, bottomMargin=0.9 * inch)
        story = [Paragraph("Field Phenotyping Run Report", self.title_style),
                 Paragraph(f"Generated: {datetime.now().strftime('%B %d, %Y')}", self.normal_style),
                 Spacer(1, 16)]
        for manifest in manifests:
            story += self._manifest_section(manifest)
        for name in PREVIEW_IMAGES:
            preview = os.path.join(self.output_dir, name)
            if os.path.exists(preview):
                story += [Paragraph(name, self.heading_style), Image(preview, width=5 * inch, height=3.5 * inch,
                                                                    kind='proportional')]
        doc.build(story, canvasmaker=NumberedCanvas)
        logger.info(f"Run report written to {path}")
        return path
