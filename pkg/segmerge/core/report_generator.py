"""
基准运行报告生成器
"""

import os
import time
from datetime import datetime
from typing import Any, Dict, List

from .utils import SegMergeUtils


class BenchReportGenerator:
    """sweep 运行报告生成器，输出 Markdown"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings
        self.start_time = time.time()
        self.cell_results: Dict[str, Dict[str, Any]] = {}

    def record_cell_start(self, cell: str):
        """记录单元开始"""
        self.cell_results[cell] = {
            'start_time': time.time(),
            'status': 'running'
        }

    def record_cell_end(self, cell: str, result: Dict[str, Any]):
        """记录单元结束"""
        if cell not in self.cell_results:
            self.cell_results[cell] = {}

        self.cell_results[cell].update({
            'end_time': time.time(),
            'status': result.get('status', 'unknown'),
            'result': result
        })

    def generate_report(self, output_dir: str) -> str:
        """生成运行报告"""
        total_time = time.time() - self.start_time

        cell_times = {}
        for cell, data in self.cell_results.items():
            if 'start_time' in data and 'end_time' in data:
                cell_times[cell] = round(data['end_time'] - data['start_time'], 2)

        report_content = self._build_report_content(total_time, cell_times)
        report_file = os.path.join(output_dir, "bench_report.md")
        SegMergeUtils.save_text_file(report_file, report_content)
        return report_file

    def _build_report_content(self, total_time: float, cell_times: Dict[str, float]) -> str:
        """构建报告内容"""
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        settings = ", ".join(f"{k}={v}" for k, v in self.settings.items())

        content = f"""# 基准测试报告

**生成时间**: {timestamp}
**总执行时间**: {round(total_time, 2)} 秒 ({round(total_time / 60, 2)} 分钟)
**运行参数**: {settings}

## 延迟与加速比

| 单元 | 状态 | 中位延迟(ms) | t_orig(ms) | 加速比 | 单元耗时(秒) |
|------|------|-------------|------------|--------|-------------|
"""
        completed: List[Dict[str, Any]] = []
        for cell, data in self.cell_results.items():
            result = data.get('result', {})
            status = data.get('status', '未执行')
            if status == 'completed':
                completed.append({'cell': cell, **result})
                content += (f"| {cell} | ✅ | {result['median_s'] * 1000:.2f} | {result['t_orig'] * 1000:.2f} "
                            f"| {result['speedup']:.3f} | {cell_times.get(cell, 0)} |\n")
            else:
                content += f"| {cell} | ❌ | - | - | - | {cell_times.get(cell, 0)} |\n"
                if 'error' in result:
                    content += f"\n> {cell}: {result['error']}\n\n"

        content += "\n## 性能分析\n\n"
        if completed:
            fastest = min(completed, key=lambda r: r['median_s'])
            slowest = max(completed, key=lambda r: r['median_s'])
            best = max(completed, key=lambda r: r['speedup'])
            content += f"- **最快单元**: {fastest['cell']} ({fastest['median_s'] * 1000:.2f} ms)\n"
            content += f"- **最慢单元**: {slowest['cell']} ({slowest['median_s'] * 1000:.2f} ms)\n"
            content += f"- **最大加速比**: {best['cell']} ({best['speedup']:.3f}x)\n"
        else:
            content += "- 没有完成的单元\n"

        content += "\n## 说明\n\n"
        content += "- 加速比 = 同一次运行中原始 Segformer 的中位延迟 / 变体中位延迟\n"
        content += "- 绝对延迟与硬件相关，只有相对趋势有意义\n"
        return content
