#pragma once

// Natural-language prompt wrappers around task inputs and outputs.
//
// A template is a lowercase word string with the placeholders {NAME}, {x}
// and {y}, e.g. "for an utterance from the {NAME} task , {x} has the
// following intent {y}". Words before {x} form the prefix, words between
// {x} and {y} the postfix.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcll/data.hpp"

namespace pcll {

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::intent;
  std::string template_text;
  std::vector<std::string> prefix;   // name already substituted
  std::vector<std::string> postfix;
};

constexpr int kIntentTemplatePresets = 5;
// Intent templates 1..5; preset 1 is the default.
const std::string& intent_template(int preset);
const std::string& slot_template();
const std::string& default_template(TaskKind kind);

// Name substituted for the task name in the no-task-id ablation.
inline constexpr std::string_view kGenericTaskName = "current";

TaskSpec make_task_spec(const std::string& name, TaskKind kind, const std::string& template_text);
TaskSpec make_task_spec(const std::string& name, TaskKind kind);
// Same template with the task name replaced by "current".
TaskSpec without_task_id(const TaskSpec& spec);
// Single special-token prompt: "__name__ {x} __ans__ {y}".
TaskSpec make_token_spec(const std::string& name, TaskKind kind);

// Every word the templates and output serializations can emit for these specs.
std::vector<std::string> prompt_tokens(std::span<const TaskSpec> specs);

struct TokenRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

// ids = [BOS] prefix x postfix y [EOS]. Without an output the sequence ends
// after the postfix and has no [EOS].
struct RenderedPrompt {
  std::vector<int> ids;
  TokenRange prefix;
  TokenRange x;
  TokenRange postfix;
  TokenRange y;
  bool has_output = false;

  int length() const { return static_cast<int>(ids.size()); }
};

// Output y as words: the intent label, or "slot : value ; ... ." / "no slot in this sentence .".
std::vector<std::string> serialize_output(TaskKind kind, const Sample& sample);

// max_len > 0 bounds the sequence length; x is truncated to fit, and a
// DataError is thrown if the templates and output alone do not fit.
RenderedPrompt render(const TaskSpec& task, const Vocab& vocab, std::span<const std::string> x,
                      const std::vector<std::string>* y, int max_len = 0);
RenderedPrompt render(const TaskSpec& task, const Vocab& vocab, const Sample& sample, bool with_output,
                      int max_len = 0);
RenderedPrompt render_no_task_id(const TaskSpec& task, const Vocab& vocab, const Sample& sample, bool with_output,
                                 int max_len = 0);

enum class ParseStatus { ok, no_prefix, no_postfix, empty_x, empty_y, bad_output, special_token };
std::string_view to_string(ParseStatus status);

struct ParseResult {
  ParseStatus status = ParseStatus::ok;
  std::optional<Sample> sample;  // set iff status == ok; provenance is pseudo
};

// Inverse of render: splits a generated id sequence into (x, y).
ParseResult parse_generated(const TaskSpec& task, const Vocab& vocab, std::span<const int> ids);

// Parses output words (no [EOS]) into the sample's intent or slots.
bool parse_output(TaskKind kind, std::span<const std::string> y, Sample& out);

}  // namespace pcll
