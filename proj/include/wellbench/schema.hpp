#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace wellbench {

// The six base wellness dimensions plus the two merged codes used by the
// coarser schemas. Base order is fixed (PA, IA, VA, SA, SpA, EA) so label
// vectors are reproducible across runs.
enum class Dimension : std::uint8_t { PA, IA, VA, SA, SpA, EA, IVA, SpEA };

constexpr int kBaseDimensionCount = 6;

const std::vector<Dimension>& base_dimensions();

std::string dimension_code(Dimension d);
std::string dimension_display_name(Dimension d);
Dimension dimension_from_code(const std::string& code);  // throws SchemaError
bool is_base_dimension(Dimension d);

// Ordered label set plus the total map from the six base codes into it.
struct LabelSchema {
    std::vector<Dimension> labels;
    std::map<Dimension, Dimension> merge_map;  // base code -> schema code

    std::size_t size() const { return labels.size(); }
    int index_of(Dimension d) const;  // -1 when absent

    // Throws SchemaError unless merge_map is total over the base codes and
    // every target appears in labels.
    void validate() const;
};

enum class TaskKind { multi_label, multi_class };

std::string task_kind_name(TaskKind t);
TaskKind task_kind_from_name(const std::string& name);  // throws SchemaError

// Binary vector (multi-label) or a single class index (multi-class) over a
// schema. values holds the binary vector in multi-label mode and is unused
// in multi-class mode.
struct LabelVector {
    TaskKind task_kind = TaskKind::multi_label;
    std::vector<std::uint8_t> values;  // multi-label: one 0/1 per schema label
    int class_index = -1;              // multi-class: index into schema labels

    static LabelVector multi_label(std::vector<std::uint8_t> v);
    static LabelVector multi_class(int cls);
};

// Default hierarchy: 6 = base; 5 merges {SpA,EA} -> SpEA; 4 additionally
// merges {IA,VA} -> IVA. Supported counts: 4, 5, 6.
LabelSchema schema_for(int label_count);

// Maps a vector over the 6 base labels into the target schema. Multi-label
// semantics: a merged label is the logical OR of its constituents.
// Multi-class semantics: the class is mapped through merge_map.
LabelVector merge_labels(const LabelVector& v, const LabelSchema& base,
                         const LabelSchema& target);

// Declarative config block (label names + merge map), so non-default
// schemas (e.g. a 3-label variant) can be user-supplied.
std::string schema_to_json(const LabelSchema& schema);
LabelSchema schema_from_json(const std::string& text);

}  // namespace wellbench
