"""Модуль для визуализации результатов оценки"""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protoinfomax.evaluation import CalibrationReport, ThresholdResult
from protoinfomax.exceptions import VisualizationError


class ReportVisualizer:
    """Класс для построения графиков калибровки и порога"""

    def __init__(self, title_prefix: str):
        """
        Инициализация визуализатора

        Args:
            title_prefix: Префикс заголовков (обычно модель и K)
        """
        self.title_prefix = title_prefix
        self.set_style()

    def set_style(self):
        """Настройка стиля графиков"""
        plt.style.use('seaborn-v0_8-whitegrid')

    def _save(self, path: str) -> None:
        plt.tight_layout()
        plt.savefig(path, dpi=100)
        plt.close()

    def plot_reliability_diagram(self, report: CalibrationReport, path: str) -> None:
        """
        Диаграмма надёжности: точность и средняя уверенность по интервалам

        Args:
            report: Отчёт калибровки ID-классификации
            path: Путь к PNG
        """
        try:
            plt.figure(figsize=(7, 7))
            width = report.bins[0].hi - report.bins[0].lo
            centers = [b.lo + width / 2 for b in report.bins]
            plt.bar(centers, [b.accuracy for b in report.bins], width=width,
                    edgecolor='black', alpha=0.7, color='#2E86AB', label='Точность')
            plt.bar(centers, [b.confidence - b.accuracy if b.count else 0.0 for b in report.bins],
                    bottom=[b.accuracy for b in report.bins], width=width,
                    edgecolor='#e74c3c', alpha=0.3, color='#e74c3c', hatch='//', label='Разрыв')
            plt.plot([0, 1], [0, 1], linestyle='--', color='gray', label='Идеальная калибровка')
            plt.xlim(0, 1)
            plt.ylim(0, 1)
            plt.xlabel('Уверенность (d + 1) / 2')
            plt.ylabel('Точность')
            plt.title(f'{self.title_prefix}: диаграмма надёжности (ECE = {report.ece_percent:.2f})')
            plt.legend(loc='upper left')
            self._save(path)

        except Exception as e:
            raise VisualizationError(f"Ошибка при построении диаграммы надёжности: {e}")

    def plot_confidence_histogram(self, report: CalibrationReport, path: str,
                                  subject: str = 'OOD') -> None:
        """
        Гистограмма уверенности с линиями средней уверенности и точности

        Args:
            report: Отчёт по интервалам
            path: Путь к PNG
            subject: Подпись набора записей
        """
        try:
            plt.figure(figsize=(8, 5))
            width = report.bins[0].hi - report.bins[0].lo
            centers = [b.lo + width / 2 for b in report.bins]
            shares = [b.count / report.n for b in report.bins]
            plt.bar(centers, shares, width=width, edgecolor='black', alpha=0.7, color='#A23B72')
            plt.axvline(report.average_confidence, color='#3498db', linestyle='--', linewidth=2,
                        label=f'Средняя уверенность {report.average_confidence:.3f}')
            plt.axvline(report.accuracy, color='#27ae60', linestyle='-', linewidth=2,
                        label=f'Точность {report.accuracy:.3f}')
            plt.xlim(0, 1)
            plt.xlabel('Уверенность (d + 1) / 2')
            plt.ylabel('Доля записей')
            plt.title(f'{self.title_prefix}: гистограмма уверенности ({subject})')
            plt.legend(loc='upper left')
            self._save(path)

        except Exception as e:
            raise VisualizationError(f"Ошибка при построении гистограммы уверенности: {e}")

    def plot_threshold_sweep(self, threshold: ThresholdResult, path: str) -> None:
        """
        Кривые FRR и FAR по кандидатам порога с отметкой выбранного tau

        Args:
            threshold: Результат выбора порога
            path: Путь к PNG
        """
        try:
            if not threshold.trace:
                raise VisualizationError("Пустая трасса порога")
            candidates, frr, far = (np.array(column) for column in zip(*threshold.trace))

            plt.figure(figsize=(10, 6))
            plt.plot(candidates, frr, label='FRR', color='#e74c3c', linewidth=2)
            plt.plot(candidates, far, label='FAR', color='#3498db', linewidth=2)
            plt.axvline(threshold.tau, color='gray', linestyle='--',
                        label=f'tau = {threshold.tau:.4f}')
            plt.xlabel('Порог tau (мера d)')
            plt.ylabel('Доля ошибок')
            plt.title(f'{self.title_prefix}: FRR и FAR в зависимости от порога')
            plt.legend(loc='center right')
            plt.grid(True, alpha=0.3)
            self._save(path)

        except VisualizationError:
            raise
        except Exception as e:
            raise VisualizationError(f"Ошибка при построении кривых порога: {e}")
