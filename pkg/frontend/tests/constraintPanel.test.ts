import { describe, expect, it } from "vitest";

import { ConstraintPanel } from "../src/constraintPanel.js";
import { SKILLS } from "./stubs.js";

describe("constraint panel payloads", () => {
  it("two selected skills produce an explicit payload of size 2", () => {
    const panel = new ConstraintPanel(SKILLS, "stub");
    panel.toggleSkill(902);
    panel.toggleSkill(903);
    expect(panel.payload()).toEqual({
      constraints: { variant: "explicit", skills: [902, 903] },
      strategy: "stub",
    });
  });

  it("profile mode produces the categorical learner-profile payload", () => {
    const panel = new ConstraintPanel(SKILLS, "stub");
    panel.setMode("profile");
    panel.setProfileLevel("would", "B1");
    expect(panel.payload()).toEqual({
      learner_profile: { would: "B1" },
      strategy: "stub",
    });
  });

  it("empty selection disables sending", () => {
    const panel = new ConstraintPanel(SKILLS);
    expect(panel.payload()).toBeNull();
    expect(panel.canSend()).toBe(false);
    panel.setMode("profile");
    expect(panel.canSend()).toBe(false);
  });

  it("selection is capped at six skills and toggles off again", () => {
    const many = Array.from({ length: 8 }, (_, i) => ({
      ...SKILLS[0],
      skill_id: 900 + i,
    }));
    const panel = new ConstraintPanel(many);
    for (const skill of many) {
      panel.toggleSkill(skill.skill_id);
    }
    expect(panel.snapshot().selectedSkills).toHaveLength(6);
    panel.toggleSkill(900);
    expect(panel.snapshot().selectedSkills).not.toContain(900);
  });

  it("unknown skills are rejected", () => {
    const panel = new ConstraintPanel(SKILLS);
    expect(panel.toggleSkill(31337)).toBe(false);
    expect(panel.payload()).toBeNull();
  });

  it("groups skills by subcategory and level for rendering", () => {
    const panel = new ConstraintPanel(SKILLS);
    const grouped = panel.grouped();
    expect([...grouped.keys()]).toEqual(["superlatives", "would", "negation"]);
    expect(grouped.get("would")?.get("B1")?.[0].skill_id).toBe(902);
  });
});
