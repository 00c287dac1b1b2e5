/**
 * Per-skill progress: bot exposures next to learner productions, refreshed
 * from GET /progress and refetched when the window regains focus (the
 * session may have advanced in another tab).
 */

import type { ApiClient } from "./api.js";
import type { ProgressPayload, SkillInfo } from "./types.js";

export class ProgressView {
  private latest: ProgressPayload | null = null;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private sessionId: string,
    private skillIndex: Map<number, SkillInfo>,
    windowRef: Window = window,
  ) {
    this.root.classList.add("progress-view");
    windowRef.addEventListener("focus", () => {
      void this.refresh();
    });
  }

  async refresh(): Promise<ProgressPayload> {
    const payload = await this.api.getProgress(this.sessionId);
    this.latest = payload;
    this.render(payload);
    return payload;
  }

  private render(payload: ProgressPayload): void {
    this.root.textContent = "";
    const table = document.createElement("table");
    table.className = "progress-table";
    const head = document.createElement("tr");
    for (const label of ["skill", "exposures", "productions"]) {
      const th = document.createElement("th");
      th.textContent = label;
      head.append(th);
    }
    table.append(head);
    for (const [skillId, entry] of Object.entries(payload.skills)) {
      const row = document.createElement("tr");
      row.dataset.skillId = skillId;
      const name = document.createElement("td");
      const skill = this.skillIndex.get(Number(skillId));
      name.textContent = skill ? `${skill.subcategory} — ${skill.guideword}` : skillId;
      const exposures = document.createElement("td");
      exposures.className = "exposures";
      exposures.textContent = String(entry.exposures);
      const productions = document.createElement("td");
      productions.className = "productions";
      productions.textContent = String(entry.productions);
      row.append(name, exposures, productions);
      table.append(row);
    }
    this.root.append(table);
  }

  counters(): Record<string, { exposures: number; productions: number }> {
    const rows = this.root.querySelectorAll("tr[data-skill-id]");
    const out: Record<string, { exposures: number; productions: number }> = {};
    for (const row of Array.from(rows)) {
      const skillId = (row as HTMLElement).dataset.skillId as string;
      out[skillId] = {
        exposures: Number(row.querySelector(".exposures")?.textContent ?? "0"),
        productions: Number(row.querySelector(".productions")?.textContent ?? "0"),
      };
    }
    return out;
  }

  lastPayload(): ProgressPayload | null {
    return this.latest;
  }
}
