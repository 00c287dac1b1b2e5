/**
 * Teacher-facing constraint panel: pick explicit skills (grouped by
 * subcategory and level) or set a per-subcategory level profile. The payload
 * matches the session-creation schema of the service exactly.
 */

import type { SessionCreatePayload, SkillInfo } from "./types.js";

export type PanelMode = "explicit" | "profile";

const MAX_EXPLICIT_SKILLS = 6;

export interface ConstraintPanelState {
  mode: PanelMode;
  selectedSkills: number[];
  profile: Record<string, string>;
}

export class ConstraintPanel {
  private state: ConstraintPanelState = { mode: "explicit", selectedSkills: [], profile: {} };

  constructor(
    private skills: SkillInfo[],
    private strategy: string = "stub",
  ) {}

  /** Skills grouped for rendering: subcategory -> level -> skills. */
  grouped(): Map<string, Map<string, SkillInfo[]>> {
    const groups = new Map<string, Map<string, SkillInfo[]>>();
    for (const skill of this.skills) {
      const byLevel = groups.get(skill.subcategory) ?? new Map<string, SkillInfo[]>();
      const bucket = byLevel.get(skill.level) ?? [];
      bucket.push(skill);
      byLevel.set(skill.level, bucket);
      groups.set(skill.subcategory, byLevel);
    }
    return groups;
  }

  setMode(mode: PanelMode): void {
    this.state.mode = mode;
  }

  toggleSkill(skillId: number): boolean {
    const index = this.state.selectedSkills.indexOf(skillId);
    if (index >= 0) {
      this.state.selectedSkills.splice(index, 1);
      return false;
    }
    if (this.state.selectedSkills.length >= MAX_EXPLICIT_SKILLS) {
      return false;
    }
    if (!this.skills.some((s) => s.skill_id === skillId)) {
      return false;
    }
    this.state.selectedSkills.push(skillId);
    return true;
  }

  setProfileLevel(subcategory: string, level: string | null): void {
    if (level === null) {
      delete this.state.profile[subcategory];
    } else {
      this.state.profile[subcategory] = level;
    }
  }

  snapshot(): ConstraintPanelState {
    return {
      mode: this.state.mode,
      selectedSkills: [...this.state.selectedSkills],
      profile: { ...this.state.profile },
    };
  }

  /** True when the current selection can be submitted. */
  canSend(): boolean {
    return this.payload() !== null;
  }

  /** The session-creation payload, or null when the selection is empty. */
  payload(): SessionCreatePayload | null {
    if (this.state.mode === "explicit") {
      if (this.state.selectedSkills.length === 0) {
        return null;
      }
      return {
        constraints: { variant: "explicit", skills: [...this.state.selectedSkills] },
        strategy: this.strategy,
      };
    }
    const entries = Object.entries(this.state.profile);
    if (entries.length === 0) {
      return null;
    }
    return {
      learner_profile: Object.fromEntries(entries),
      strategy: this.strategy,
    };
  }
}
