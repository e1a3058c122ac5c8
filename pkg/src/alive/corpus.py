# ALIVE Corpus Loader Module
# Reads raw-text documents for the self-play loop from files, directories or QA datasets
# QA pairs are concatenated through a text template into a single document

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .config import Config
from .datamodel import Document, NoDataError

DEFAULT_QA_TEMPLATE = "{question}\n{answer}"


class CorpusLoader:
    """Loads documents from a text file, a directory of ``.txt`` files or a JSONL QA set."""

    def __init__(self, config: Optional[Config] = None):
        """
        Initialize corpus loader.

        Args:
            config (Optional[Config]): Supplies ``corpus.qa_template`` and the QA field names.
        """
        self.logger = logging.getLogger(__name__)
        config = config or Config.from_dict({})
        self.qa_template = config.get('corpus.qa_template', DEFAULT_QA_TEMPLATE)
        self.question_field = config.get('corpus.question_field', 'question')
        self.answer_field = config.get('corpus.answer_field', 'answer')

    def load(self, path: Union[str, Path]) -> List[Document]:
        """
        Load every document found at ``path``.

        Args:
            path (Union[str, Path]): ``.jsonl`` QA file, plain text file (one
                document per line) or directory (one document per ``.txt`` file).

        Returns:
            List[Document]: Documents in a stable order.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Corpus not found: {path}")

        if path.is_dir():
            documents = self._load_directory(path)
        elif path.suffix == '.jsonl':
            documents = self._load_qa(path)
        else:
            documents = self._load_lines(path)

        if not documents:
            raise NoDataError(f"Corpus {path} contains no non-empty document")
        self.logger.info(f"Loaded {len(documents)} documents from {path}")
        return documents

    def _load_lines(self, path: Path) -> List[Document]:
        documents = []
        with open(path, 'r', encoding='utf-8') as f:
            for index, line in enumerate(f):
                text = line.strip()
                if text:
                    documents.append(Document(id=f"{path.stem}-{index:06d}", text=text, source=str(path)))
        return documents

    def _load_directory(self, path: Path) -> List[Document]:
        documents = []
        for file in sorted(path.glob('*.txt')):
            text = file.read_text(encoding='utf-8').strip()
            if text:
                documents.append(Document(id=file.stem, text=text, source=str(file)))
            else:
                self.logger.warning(f"Skipping empty document {file}")
        return documents

    def _load_qa(self, path: Path) -> List[Document]:
        documents = []
        with open(path, 'r', encoding='utf-8') as f:
            for index, line in enumerate(f):
                if not line.strip():
                    continue
                try:
                    row: Dict[str, Any] = json.loads(line)
                except json.JSONDecodeError as e:
                    self.logger.warning(f"Skipping malformed line {index} of {path}: {e}")
                    continue
                question, answer = row.get(self.question_field), row.get(self.answer_field)
                if not question or not answer:
                    self.logger.warning(f"Skipping line {index} of {path}: missing question or answer")
                    continue
                text = self.qa_template.format(question=str(question).strip(), answer=str(answer).strip())
                doc_id = str(row.get('id') or f"{path.stem}-{index:06d}")
                documents.append(Document(id=doc_id, text=text, source=str(path)))
        return documents


def document_digest(document: Document) -> str:
    """Short content hash used to label documents in logs and manifests."""
    return hashlib.sha256(document.text.encode('utf-8')).hexdigest()[:12]
